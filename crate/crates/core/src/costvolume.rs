//! Multi-frame plane-sweep matching cost volume and the quantities derived
//! from it: soft-max match probabilities, expected inverse depth and
//! winner-take-all labels.

use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;

use crate::features::{BilinearSupport, FeatureMap};
use crate::geometry::{CameraIntrinsics, EpipolarLine, InverseDepthGrid, Pose};
use crate::image::DepthMap;
use crate::{Error, Real, Result};

/// Descriptor distance used for matching.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MatchNorm {
    #[default]
    L1,
    SquaredL2,
}

impl MatchNorm {
    /// Distance between two descriptors, accumulated in 64-bit.
    #[inline]
    pub fn distance<T: Real>(self, a: &[T], b: &[T]) -> f64 {
        match self {
            MatchNorm::L1 => a.iter().zip(b).map(|(x, y)| (x.f64() - y.f64()).abs()).sum(),
            MatchNorm::SquaredL2 => a
                .iter()
                .zip(b)
                .map(|(x, y)| {
                    let d = x.f64() - y.f64();
                    d * d
                })
                .sum(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MatchNorm::L1 => "l1",
            MatchNorm::SquaredL2 => "l2sq",
        }
    }
}

impl std::fmt::Display for MatchNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MatchNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(MatchNorm::L1),
            "l2sq" | "l2" | "squared-l2" => Ok(MatchNorm::SquaredL2),
            other => Err(Error::Domain(format!("unknown norm {other:?} (expected l1 or l2sq)"))),
        }
    }
}

/// Cost assigned to bins that no live frame observes.
pub const DEFAULT_MISS_COST: f64 = 10.0;

/// Floor on inverse depth when converting to metric depth (100 m cap).
pub const RHO_FLOOR: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostVolumeOptions {
    pub norm: MatchNorm,
    pub miss_cost: f64,
}

impl Default for CostVolumeOptions {
    fn default() -> Self {
        Self { norm: MatchNorm::L1, miss_cost: DEFAULT_MISS_COST }
    }
}

/// `height × width × k_bins` matching costs, bin-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume<T> {
    width: usize,
    height: usize,
    k_bins: usize,
    frames: usize,
    cost: Vec<T>,
    support: Vec<u32>,
}

impl<T: Real> CostVolume<T> {
    /// Wraps precomputed costs; all must be finite and nonnegative.
    pub fn from_costs(width: usize, height: usize, k_bins: usize, cost: Vec<T>, support: Vec<u32>) -> Result<Self> {
        if cost.len() != width * height * k_bins || support.len() != width * height || k_bins == 0 {
            return Err(Error::Dimension("cost volume buffers do not match dimensions".into()));
        }
        if cost.iter().any(|c| !c.is_finite() || *c < T::zero()) {
            return Err(Error::Domain("costs must be finite and nonnegative".into()));
        }
        let frames = support.iter().copied().max().unwrap_or(0) as usize;
        Ok(Self { width, height, k_bins, frames, cost, support })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn k_bins(&self) -> usize {
        self.k_bins
    }

    /// Number of live frames accumulated.
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn costs(&self) -> &[T] {
        &self.cost
    }

    /// Minimum over bins of the number of frames observing each bin.
    pub fn support(&self) -> &[u32] {
        &self.support
    }

    #[inline]
    pub fn pixel_costs(&self, x: usize, y: usize) -> &[T] {
        let i = (y * self.width + x) * self.k_bins;
        &self.cost[i..i + self.k_bins]
    }

    /// The raw per-bin costs of one pixel.
    pub fn cost_curve(&self, x: usize, y: usize) -> Result<&[T]> {
        if x >= self.width || y >= self.height {
            return Err(Error::Domain(format!("pixel ({x}, {y}) outside {}x{}", self.width, self.height)));
        }
        Ok(self.pixel_costs(x, y))
    }

    /// Multiplies every cost by `s` (per-provider cost scaling).
    pub fn scaled(&self, s: T) -> Self {
        let mut out = self.clone();
        out.cost.iter_mut().for_each(|c| *c *= s);
        out
    }

    /// The volume as a feature map with one channel per bin.
    pub fn to_feature_map(&self) -> FeatureMap<T> {
        FeatureMap::new(self.width, self.height, self.k_bins, self.cost.clone()).expect("costs are finite")
    }
}

/// Accumulates the mean descriptor distance over the live frames whose
/// epipolar sample falls inside the image. Bins seen by no frame get
/// `miss_cost`; the per-pixel support is the minimum valid-frame count over
/// bins.
pub fn build_cost_volume<T: Real>(
    f_ref: &FeatureMap<T>,
    lives: &[(&FeatureMap<T>, Pose<T>)],
    grid: &InverseDepthGrid<T>,
    intr: &CameraIntrinsics<T>,
    opts: &CostVolumeOptions,
) -> Result<CostVolume<T>> {
    if lives.is_empty() {
        return Err(Error::Data("cost volume needs at least one live frame".into()));
    }
    if f_ref.width() != intr.width || f_ref.height() != intr.height {
        return Err(Error::Dimension(format!(
            "reference features {}x{} but intrinsics {}x{}",
            f_ref.width(),
            f_ref.height(),
            intr.width,
            intr.height
        )));
    }
    for (i, (fm, _)) in lives.iter().enumerate() {
        if !fm.same_shape(f_ref) {
            return Err(Error::Dimension(format!(
                "live frame {i} is {}x{}x{}, reference is {}x{}x{}",
                fm.width(),
                fm.height(),
                fm.channels(),
                f_ref.width(),
                f_ref.height(),
                f_ref.channels()
            )));
        }
    }
    let (w, h, k) = (f_ref.width(), f_ref.height(), grid.k_bins());
    let c = f_ref.channels();
    let rhos = grid.centers();
    let mut cost = vec![T::zero(); w * h * k];
    let mut support = vec![0u32; w * h];

    cost.par_chunks_mut(w * k)
        .zip(support.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (cost_row, support_row))| {
            let mut sample = vec![T::zero(); c];
            let mut dists: Vec<f64> = Vec::with_capacity(lives.len());
            let mut lines = Vec::with_capacity(lives.len());
            for x in 0..w {
                let (u, v) = (T::of_usize(x), T::of_usize(y));
                lines.clear();
                lines.extend(lives.iter().map(|(_, pose)| EpipolarLine::new(u, v, pose, intr)));
                let reference = f_ref.texel(x, y);
                let mut min_support = u32::MAX;
                for (l, &rho) in rhos.iter().enumerate() {
                    dists.clear();
                    for (line, (fm, _)) in lines.iter().zip(lives) {
                        let s = line.sample(rho, intr);
                        if !s.in_bounds {
                            continue;
                        }
                        let Some(support) = BilinearSupport::new(s.u, s.v, w, h) else { continue };
                        support.blend(fm, &mut sample);
                        dists.push(opts.norm.distance(reference, &sample));
                    }
                    // Sorting fixes the summation order, so the result does
                    // not depend on the order of the live frames.
                    dists.sort_unstable_by(f64::total_cmp);
                    let n = dists.len();
                    let value = if n == 0 { opts.miss_cost } else { dists.iter().sum::<f64>() / n as f64 };
                    cost_row[x * k + l] = T::of(value);
                    min_support = min_support.min(n as u32);
                }
                support_row[x] = min_support;
            }
        });

    Ok(CostVolume { width: w, height: h, k_bins: k, frames: lives.len(), cost, support })
}

/// Per-pixel soft-max of negated costs.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchDistribution<T> {
    pub width: usize,
    pub height: usize,
    pub k_bins: usize,
    pub prob: Vec<T>,
}

impl<T: Real> MatchDistribution<T> {
    pub fn pixel(&self, x: usize, y: usize) -> &[T] {
        let i = (y * self.width + x) * self.k_bins;
        &self.prob[i..i + self.k_bins]
    }
}

/// Numerically stable `softmax(−cost)` of one cost curve, in 64-bit.
pub fn softmax_neg(costs: &[f64], out: &mut [f64]) {
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let mut total = 0.0;
    for (o, &c) in out.iter_mut().zip(costs) {
        *o = (min - c).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

pub fn softmax_distribution<T: Real>(cv: &CostVolume<T>) -> MatchDistribution<T> {
    let k = cv.k_bins;
    let mut prob = vec![T::zero(); cv.cost.len()];
    prob.par_chunks_mut(k).zip(cv.cost.par_chunks(k)).for_each(|(p, c)| {
        let costs: Vec<f64> = c.iter().map(|v| v.f64()).collect();
        let mut out = vec![0.0; k];
        softmax_neg(&costs, &mut out);
        p.iter_mut().zip(out).for_each(|(dst, v)| *dst = T::of(v));
    });
    MatchDistribution { width: cv.width, height: cv.height, k_bins: k, prob }
}

/// Expected inverse depth per pixel and the matching depth `1/max(ρ̂, 0.01)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpectedInverseDepth<T> {
    pub rho: Vec<T>,
    pub depth: Vec<T>,
}

pub fn expected_inverse_depth<T: Real>(dist: &MatchDistribution<T>, grid: &InverseDepthGrid<T>) -> ExpectedInverseDepth<T> {
    let centers: Vec<f64> = grid.centers().iter().map(|r| r.f64()).collect();
    let rho: Vec<T> = dist
        .prob
        .chunks_exact(dist.k_bins)
        .map(|p| T::of(p.iter().zip(&centers).map(|(p, r)| p.f64() * r).sum::<f64>()))
        .collect();
    let depth = rho.iter().map(|&r| T::one() / r.max(T::of(RHO_FLOOR))).collect();
    ExpectedInverseDepth { rho, depth }
}

/// Minimum-cost bin per pixel; ties go to the smallest bin. Pixels without
/// support are invalid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WinnerTakeAll {
    pub width: usize,
    pub height: usize,
    pub bins: Vec<usize>,
    pub valid: Vec<bool>,
}

impl WinnerTakeAll {
    pub fn inverse_depth<T: Real>(&self, grid: &InverseDepthGrid<T>) -> DepthMap<T> {
        DepthMap {
            width: self.width,
            height: self.height,
            values: self.bins.iter().map(|&l| grid.rho(l)).collect(),
            valid: self.valid.clone(),
        }
    }

    pub fn depth<T: Real>(&self, grid: &InverseDepthGrid<T>) -> DepthMap<T> {
        let floor = T::of(RHO_FLOOR);
        DepthMap {
            width: self.width,
            height: self.height,
            values: self.bins.iter().map(|&l| T::one() / grid.rho(l).max(floor)).collect(),
            valid: self.valid.clone(),
        }
    }
}

pub fn argmin_first<T: Real>(costs: &[T]) -> usize {
    let mut best = 0;
    for (l, &c) in costs.iter().enumerate().skip(1) {
        if c < costs[best] {
            best = l;
        }
    }
    best
}

pub fn winner_take_all<T: Real>(cv: &CostVolume<T>) -> WinnerTakeAll {
    let bins = cv.cost.chunks_exact(cv.k_bins).map(argmin_first).collect();
    let valid = cv.support.iter().map(|&s| s > 0).collect();
    WinnerTakeAll { width: cv.width, height: cv.height, bins, valid }
}

/// Fraction of pixels with valid ground truth and a valid estimate whose
/// winning bin lies within `tolerance` bins of the ground-truth bin.
/// `None` when no pixel qualifies.
pub fn wta_accuracy<T: Real>(
    wta: &WinnerTakeAll,
    gt_inverse_depth: &DepthMap<T>,
    grid: &InverseDepthGrid<T>,
    tolerance: usize,
) -> Result<Option<f64>> {
    if gt_inverse_depth.width != wta.width || gt_inverse_depth.height != wta.height {
        return Err(Error::Dimension("ground truth and estimate differ in size".into()));
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for (i, (&bin, &ok)) in wta.bins.iter().zip(&wta.valid).enumerate() {
        if !ok || !gt_inverse_depth.valid[i] {
            continue;
        }
        total += 1;
        let (gt_bin, _) = grid.nearest_bin(gt_inverse_depth.values[i]);
        hits += (bin.abs_diff(gt_bin) <= tolerance) as usize;
    }
    Ok((total > 0).then(|| hits as f64 / total as f64))
}

/// Writes `rho,cost` rows for one cost curve.
pub fn write_cost_curve_csv<T: Real, W: Write>(grid: &InverseDepthGrid<T>, curve: &[T], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "rho,cost")?;
    for (l, c) in curve.iter().enumerate() {
        writeln!(out, "{},{}", grid.rho(l).f64(), c.f64())?;
    }
    Ok(())
}
