use rayon::prelude::*;

use crate::costvolume::{MatchNorm, RHO_FLOOR};
use crate::features::{BilinearSupport, FeatureMap};
use crate::geometry::{CameraIntrinsics, EpipolarLine, InverseDepthGrid, Pose};
use crate::image::DepthMap;
use super::extractor::{MultiScaleFeatures, TapGradients};
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_rho: f64,
    pub lambda_d: f64,
    /// Fixed cost of negatives whose sample leaves the live image.
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_rho: 5.0, lambda_d: 1.0, margin: 10.0 }
    }
}

/// Camera geometry and ground truth of a training pair at one feature
/// resolution.
#[derive(Clone, Copy, Debug)]
pub struct PairGeometry<'a, T> {
    /// Reference camera to live camera.
    pub relative_pose: Pose<T>,
    pub intrinsics: CameraIntrinsics<T>,
    pub gt_inverse_depth: &'a DepthMap<T>,
}

#[derive(Clone, Debug)]
pub struct MatchingLoss<T> {
    pub total: f64,
    pub cross_entropy: f64,
    pub regression_rho: f64,
    pub regression_depth: f64,
    /// Pixels that contributed.
    pub valid_pixels: usize,
    /// Valid-GT pixels dropped because their positive match left the image.
    pub masked_out_of_view: usize,
    /// Labels beyond the grid range that were clamped to an end bin.
    pub clamped_labels: usize,
    pub grad_ref: FeatureMap<T>,
    pub grad_live: FeatureMap<T>,
}

/// Loss terms of one pixel and `d loss / d cost` per bin.
///
/// The classification term is the binary cross-entropy summed over all
/// bins against a one-hot target at `positive`, with `P = softmax(−cost)`.
/// Logs are evaluated in the log domain so saturated distributions stay
/// finite and keep their gradient.
pub(crate) fn pixel_loss<T: Real>(
    costs: &[T],
    positive: usize,
    rhos: &[T],
    rho_star: T,
    weights: &LossWeights,
    grad_cost: &mut [T],
) -> [T; 3] {
    let k = costs.len();
    debug_assert!(k >= 2 && positive < k);
    let zero = T::zero();
    let one = T::one();

    // Scores s = −cost, shifted so the largest is 0.
    let mut top = 0;
    for l in 1..k {
        if costs[l] < costs[top] {
            top = l;
        }
    }
    let smax = -costs[top];
    let mut second = T::neg_infinity();
    for l in 0..k {
        if l != top {
            second = second.max(-costs[l]);
        }
    }
    let log_e = |l: usize| -costs[l] - smax;
    let e: Vec<T> = (0..k).map(|l| log_e(l).exp()).collect();
    let z: T = e.iter().copied().fold(zero, |a, b| a + b);
    let log_z = z.ln();

    // log Σ_{j≠l} e_j. Every l other than `top` keeps e_top = 1 in its sum.
    let log_excl: Vec<T> = (0..k)
        .map(|l| {
            if l != top {
                (z - e[l]).ln()
            } else {
                let rest: T = (0..k).filter(|&j| j != top).map(|j| (-costs[j] - second).exp()).fold(zero, |a, b| a + b);
                (second - smax) + rest.ln()
            }
        })
        .collect();

    let mut ce = log_z - log_e(positive);
    for l in 0..k {
        if l != positive {
            ce += log_z - log_excl[l];
        }
    }

    let p: Vec<T> = e.iter().map(|&v| v / z).collect();
    let rho_hat = p.iter().zip(rhos).fold(zero, |a, (&p, &r)| a + p * r);
    let lambda_rho = T::of(weights.lambda_rho);
    let lambda_d = T::of(weights.lambda_d);
    let floor = T::of(RHO_FLOOR);
    let reg_rho = lambda_rho * (rho_hat - rho_star).powi(2);
    let mut d_rho_hat = T::of(2.0) * lambda_rho * (rho_hat - rho_star);
    let mut reg_d = zero;
    if rho_star >= floor {
        let d_hat = one / rho_hat.max(floor);
        let d_star = one / rho_star;
        reg_d = lambda_d * (d_hat - d_star).powi(2);
        if rho_hat > floor {
            d_rho_hat += T::of(2.0) * lambda_d * (d_hat - d_star) * (-one / (rho_hat * rho_hat));
        }
    }

    // Σ over negatives l ∉ {positive, top} of 1/Σ_{j≠l} e_j; each term ≤ 1.
    let s_rest: T = (0..k)
        .filter(|&l| l != positive && l != top)
        .map(|l| (-log_excl[l]).exp())
        .fold(zero, |a, b| a + b);
    let kf = T::of_usize(k);
    for j in 0..k {
        // Σ_{l≠positive, l≠j} e_j / Σ_{i≠l} e_i
        let mut inner = s_rest;
        if j != positive && j != top {
            inner -= (-log_excl[j]).exp();
        }
        let mut r = e[j] * inner;
        if top != positive && top != j {
            r += (log_e(j) - log_excl[top]).exp();
        }
        let delta = if j == positive { one } else { zero };
        let d_ce = kf * p[j] - delta - r;
        let d_reg = p[j] * d_rho_hat * (rhos[j] - rho_hat);
        grad_cost[j] = -(d_ce + d_reg);
    }
    [ce, reg_rho, reg_d]
}

struct RowResult<T> {
    terms: [f64; 3],
    valid: usize,
    masked: usize,
    clamped: usize,
    grad_ref: Vec<T>,
    supports: Vec<BilinearSupport<T>>,
    sample_grads: Vec<T>,
}

/// Matching loss between two feature maps of one pair: binary
/// cross-entropy over the soft-max of negated costs plus the inverse-depth
/// and depth regression terms, with gradients for both maps.
///
/// Bins whose live sample leaves the image cost `weights.margin` and pass no
/// gradient; pixels whose ground-truth bin leaves the image are masked.
pub fn matching_loss<T: Real>(
    f_ref: &FeatureMap<T>,
    f_live: &FeatureMap<T>,
    geom: &PairGeometry<'_, T>,
    grid: &InverseDepthGrid<T>,
    weights: &LossWeights,
    norm: MatchNorm,
) -> Result<MatchingLoss<T>> {
    let (w, h, c) = (f_ref.width(), f_ref.height(), f_ref.channels());
    if !f_ref.same_shape(f_live) {
        return Err(Error::Dimension("reference and live features differ in shape".into()));
    }
    let gt = geom.gt_inverse_depth;
    if gt.width != w || gt.height != h || geom.intrinsics.width != w || geom.intrinsics.height != h {
        return Err(Error::Dimension(format!(
            "features {w}x{h}, ground truth {}x{}, intrinsics {}x{}",
            gt.width, gt.height, geom.intrinsics.width, geom.intrinsics.height
        )));
    }
    let k = grid.k_bins();
    let rhos = grid.centers();
    let margin = T::of(weights.margin);
    let intr = &geom.intrinsics;

    let rows: Vec<RowResult<T>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = RowResult {
                terms: [0.0; 3],
                valid: 0,
                masked: 0,
                clamped: 0,
                grad_ref: vec![T::zero(); w * c],
                supports: Vec::new(),
                sample_grads: Vec::new(),
            };
            let mut costs = vec![T::zero(); k];
            let mut grads = vec![T::zero(); k];
            let mut supports: Vec<Option<BilinearSupport<T>>> = vec![None; k];
            let mut samples = vec![T::zero(); k * c];
            for x in 0..w {
                let Some(rho_star) = gt.get(x, y) else { continue };
                let (positive, clamped) = grid.nearest_bin(rho_star);
                let line = EpipolarLine::new(T::of_usize(x), T::of_usize(y), &geom.relative_pose, intr);
                for (l, s) in supports.iter_mut().enumerate() {
                    let e = line.sample(rhos[l], intr);
                    *s = if e.in_bounds { BilinearSupport::new(e.u, e.v, w, h) } else { None };
                }
                if supports[positive].is_none() {
                    row.masked += 1;
                    continue;
                }
                let a = f_ref.texel(x, y);
                for l in 0..k {
                    costs[l] = match &supports[l] {
                        Some(s) => {
                            let b = &mut samples[l * c..(l + 1) * c];
                            s.blend(f_live, b);
                            T::of(norm.distance(a, b))
                        }
                        None => margin,
                    };
                }
                let label = rho_star.max(grid.rho_min()).min(grid.rho_max());
                let terms = pixel_loss(&costs, positive, &rhos, label, weights, &mut grads);
                for (acc, t) in row.terms.iter_mut().zip(terms) {
                    *acc += t.f64();
                }
                row.valid += 1;
                row.clamped += clamped as usize;

                let gref = &mut row.grad_ref[x * c..(x + 1) * c];
                for l in 0..k {
                    let Some(s) = supports[l] else { continue };
                    let g = grads[l];
                    let b = &samples[l * c..(l + 1) * c];
                    row.supports.push(s);
                    for ch in 0..c {
                        let de_da = match norm {
                            MatchNorm::SquaredL2 => T::of(2.0) * (a[ch] - b[ch]),
                            MatchNorm::L1 => sign(a[ch] - b[ch]),
                        };
                        gref[ch] += g * de_da;
                        row.sample_grads.push(-g * de_da);
                    }
                }
            }
            row
        })
        .collect();

    let mut grad_ref = FeatureMap::zeros(w, h, c);
    let mut grad_live = FeatureMap::zeros(w, h, c);
    let mut terms = [0.0f64; 3];
    let (mut valid, mut masked, mut clamped) = (0, 0, 0);
    for (y, row) in rows.iter().enumerate() {
        for (acc, t) in terms.iter_mut().zip(row.terms) {
            *acc += t;
        }
        valid += row.valid;
        masked += row.masked;
        clamped += row.clamped;
        grad_ref.data_mut()[y * w * c..(y + 1) * w * c].copy_from_slice(&row.grad_ref);
        for (s, g) in row.supports.iter().zip(row.sample_grads.chunks_exact(c)) {
            s.scatter(g, grad_live.data_mut());
        }
    }
    if valid == 0 {
        return Err(Error::Data("no pixel with valid ground truth and an in-view positive match".into()));
    }
    Ok(MatchingLoss {
        total: terms.iter().sum(),
        cross_entropy: terms[0],
        regression_rho: terms[1],
        regression_depth: terms[2],
        valid_pixels: valid,
        masked_out_of_view: masked,
        clamped_labels: clamped,
        grad_ref,
        grad_live,
    })
}

#[inline]
fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Full-resolution geometry and ground truth of a training pair.
#[derive(Clone, Copy, Debug)]
pub struct PairSupervision<'a, T> {
    pub relative_pose: Pose<T>,
    pub intrinsics: CameraIntrinsics<T>,
    pub gt_inverse_depth: &'a DepthMap<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TapLoss {
    /// Weighted loss of the tap.
    pub loss: f64,
    pub valid_pixels: usize,
}

#[derive(Clone, Debug)]
pub struct DeepSupervisedLoss<T> {
    pub total: f64,
    pub taps: Vec<TapLoss>,
    pub grad_ref: TapGradients<T>,
    pub grad_live: TapGradients<T>,
}

/// Weighted sum of [`matching_loss`] over every tap of two multi-scale
/// feature sets. Each tap uses intrinsics scaled to its resolution and
/// nearest-neighbour subsampled ground truth. Taps with zero weight, or with
/// no usable pixel, contribute nothing.
pub fn deep_supervised_loss<T: Real>(
    reference: &MultiScaleFeatures<T>,
    live: &MultiScaleFeatures<T>,
    sup: &PairSupervision<'_, T>,
    grid: &InverseDepthGrid<T>,
    weights: &LossWeights,
    tap_weights: &[f64],
    norm: MatchNorm,
) -> Result<DeepSupervisedLoss<T>> {
    let ref_taps = reference.taps();
    let live_taps = live.taps();
    if ref_taps.len() != live_taps.len() {
        return Err(Error::Dimension(format!("{} reference taps but {} live taps", ref_taps.len(), live_taps.len())));
    }
    if tap_weights.len() != ref_taps.len() {
        return Err(Error::Dimension(format!("{} tap weights for {} taps", tap_weights.len(), ref_taps.len())));
    }
    if tap_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::Domain("tap weights must be finite and nonnegative".into()));
    }
    let mut out = DeepSupervisedLoss {
        total: 0.0,
        taps: Vec::with_capacity(ref_taps.len()),
        grad_ref: TapGradients::default(),
        grad_live: TapGradients::default(),
    };
    let mut any_valid = false;
    for (((fr, factor), (fl, _)), &tw) in ref_taps.iter().zip(&live_taps).zip(tap_weights) {
        if tw == 0.0 {
            out.taps.push(TapLoss { loss: 0.0, valid_pixels: 0 });
            out.grad_ref.taps.push(None);
            out.grad_live.taps.push(None);
            continue;
        }
        let intrinsics = sup.intrinsics.scaled(*factor)?;
        let gt = if *factor == 1 { sup.gt_inverse_depth.clone() } else { sup.gt_inverse_depth.downsample_nearest(*factor as usize) };
        let geom = PairGeometry { relative_pose: sup.relative_pose, intrinsics, gt_inverse_depth: &gt };
        match matching_loss(fr, fl, &geom, grid, weights, norm) {
            Ok(m) => {
                any_valid = true;
                let scale = T::of(tw);
                out.total += tw * m.total;
                out.taps.push(TapLoss { loss: tw * m.total, valid_pixels: m.valid_pixels });
                out.grad_ref.taps.push(Some(m.grad_ref.map(|g| g * scale)));
                out.grad_live.taps.push(Some(m.grad_live.map(|g| g * scale)));
            }
            Err(Error::Data(_)) => {
                out.taps.push(TapLoss { loss: 0.0, valid_pixels: 0 });
                out.grad_ref.taps.push(None);
                out.grad_live.taps.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    if !any_valid && tap_weights.iter().any(|&w| w > 0.0) {
        return Err(Error::Data("no tap has a pixel with an in-view positive match".into()));
    }
    Ok(out)
}
