//! Huber-TV regularization of a cost volume by alternating a primal-dual
//! smoothing step on an inverse-depth field with an exhaustive per-pixel
//! search over the cost curve, coupled through a relaxation `θ` that is
//! tightened each outer iteration.

use std::io::Write;

use rayon::prelude::*;

use crate::costvolume::{winner_take_all, CostVolume, RHO_FLOOR};
use crate::geometry::InverseDepthGrid;
use crate::image::DepthMap;
use crate::metrics::{evaluate_with, DepthMetrics, LogMetric};
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThetaSchedule {
    pub start: f64,
    pub end: f64,
    /// Multiplier applied after every outer iteration.
    pub decay: f64,
}

impl Default for ThetaSchedule {
    fn default() -> Self {
        Self { start: 0.2, end: 1e-4, decay: 0.95 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegularizerConfig {
    /// Divides the data term; larger means smoother.
    pub lambda: f64,
    pub huber_eps: f64,
    pub max_outer_iters: usize,
    /// Primal-dual steps per outer iteration.
    pub inner_iters: usize,
    pub theta: ThetaSchedule,
    /// Stop once `θ` has reached its end value and the relative energy
    /// change drops below this.
    pub tolerance: f64,
    /// Multiplies the data term, to put feature providers of different
    /// magnitude on a common λ scale.
    pub cost_scale: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            huber_eps: 1e-2,
            max_outer_iters: 300,
            inner_iters: 1,
            theta: ThetaSchedule::default(),
            tolerance: 1e-6,
            cost_scale: 1.0,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.theta;
        let ok = self.lambda > 0.0
            && self.lambda.is_finite()
            && self.huber_eps > 0.0
            && self.max_outer_iters >= 1
            && self.inner_iters >= 1
            && t.end > 0.0
            && t.start >= t.end
            && t.decay > 0.0
            && t.decay < 1.0
            && self.tolerance >= 0.0
            && self.cost_scale > 0.0
            && self.cost_scale.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid regularizer configuration {self:?}")))
        }
    }

    fn data_weight(&self) -> f64 {
        self.cost_scale / self.lambda
    }
}

/// Regularized inverse depth with a per-pixel confidence
/// `1 − min/mean` of the cost curve (0 for a flat curve).
#[derive(Clone, Debug, PartialEq)]
pub struct InverseDepthField<T> {
    pub width: usize,
    pub height: usize,
    pub values: Vec<T>,
    pub confidence: Vec<T>,
    /// False where the cost volume has zero support; those values come from
    /// smoothing and miss costs only.
    pub valid: Vec<bool>,
}

impl<T: Real> InverseDepthField<T> {
    pub fn inverse_depth_map(&self) -> DepthMap<T> {
        DepthMap { width: self.width, height: self.height, values: self.values.clone(), valid: self.valid.clone() }
    }

    /// `1 / max(ρ, 0.01)`.
    pub fn depth_map(&self) -> DepthMap<T> {
        let floor = T::of(RHO_FLOOR);
        DepthMap {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&r| T::one() / r.max(floor)).collect(),
            valid: self.valid.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Regularized<T> {
    pub field: InverseDepthField<T>,
    /// Energy of the best field found so far, after each outer iteration;
    /// entry 0 is the winner-take-all initialization.
    pub energy_trace: Vec<f64>,
    pub outer_iters: usize,
}

#[inline]
fn huber(x: f64, eps: f64) -> f64 {
    if x <= eps {
        0.5 * x * x / eps
    } else {
        x - 0.5 * eps
    }
}

/// `Σ_p (cost_scale/λ)·C̃_p(ρ_p) + Σ_p huber(|∇ρ_p|)`, with `C̃` the
/// cost curve interpolated linearly between bin centers and forward
/// differences (zero across the far border).
pub fn energy<T: Real>(cv: &CostVolume<T>, grid: &InverseDepthGrid<T>, rho: &[T], cfg: &RegularizerConfig) -> f64 {
    let (w, h, k) = (cv.width(), cv.height(), cv.k_bins());
    let weight = cfg.data_weight();
    let (rmin, step) = (grid.rho_min().f64(), grid.bin_width().f64());
    let rows: Vec<f64> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut sum = 0.0;
            for x in 0..w {
                let i = y * w + x;
                let r = rho[i].f64();
                let t = ((r - rmin) / step).clamp(0.0, (k - 1) as f64);
                let l = (t.floor() as usize).min(k - 2);
                let f = t - l as f64;
                let curve = cv.pixel_costs(x, y);
                let c = (1.0 - f) * curve[l].f64() + f * curve[l + 1].f64();
                let gx = if x + 1 < w { rho[i + 1].f64() - r } else { 0.0 };
                let gy = if y + 1 < h { rho[i + w].f64() - r } else { 0.0 };
                sum += weight * c + huber((gx * gx + gy * gy).sqrt(), cfg.huber_eps);
            }
            sum
        })
        .collect();
    rows.iter().sum()
}

/// Exhaustive minimization of `(d − ρ_l)²/(2θ) + weight·C_l` with a
/// parabola through the neighbours of the best bin.
fn search<T: Real>(curve: &[T], d: T, theta: T, weight: T, rhos: &[T], step: T) -> T {
    let two = T::of(2.0);
    let obj = |l: usize| (d - rhos[l]).powi(2) / (two * theta) + weight * curve[l];
    let mut best = 0;
    let mut best_v = obj(0);
    for l in 1..curve.len() {
        let v = obj(l);
        if v < best_v {
            best = l;
            best_v = v;
        }
    }
    if best == 0 || best + 1 == curve.len() {
        return rhos[best];
    }
    let (vm, vp) = (obj(best - 1), obj(best + 1));
    let denom = vm - two * best_v + vp;
    if denom > T::zero() {
        let offset = ((vm - vp) / (two * denom)).max(-T::one()).min(T::one());
        rhos[best] + offset * step
    } else {
        rhos[best]
    }
}

/// Minimizes the regularized energy starting from the winner-take-all
/// solution and returns the lowest-energy field visited.
pub fn minimize_energy<T: Real>(
    cv: &CostVolume<T>,
    grid: &InverseDepthGrid<T>,
    cfg: &RegularizerConfig,
) -> Result<Regularized<T>> {
    cfg.validate()?;
    if cv.k_bins() != grid.k_bins() {
        return Err(Error::Dimension(format!("cost volume has {} bins, grid {}", cv.k_bins(), grid.k_bins())));
    }
    if cv.costs().iter().any(|c| !c.is_finite()) {
        return Err(Error::Numerical("cost volume contains non-finite values".into()));
    }
    let (w, h) = (cv.width(), cv.height());
    let rhos = grid.centers();
    let (rmin, rmax, step) = (grid.rho_min(), grid.rho_max(), grid.bin_width());
    let weight = T::of(cfg.data_weight());
    let eps = T::of(cfg.huber_eps);
    let sigma = T::of(1.0 / 8f64.sqrt());
    let tau = sigma;

    let wta = winner_take_all(cv);
    let mut d: Vec<T> = wta.bins.iter().map(|&l| rhos[l]).collect();
    let mut a = d.clone();
    let mut qx = vec![T::zero(); w * h];
    let mut qy = vec![T::zero(); w * h];

    let mut best = d.clone();
    let mut best_e = energy(cv, grid, &d, cfg);
    if !best_e.is_finite() {
        return Err(Error::Numerical("initial energy is not finite".into()));
    }
    let mut trace = vec![best_e];
    let mut theta = cfg.theta.start;
    let mut iters = 0;
    for n in 0..cfg.max_outer_iters {
        iters = n + 1;
        let th = T::of(theta);
        for _ in 0..cfg.inner_iters {
            // dual ascent with the Huber resolvent, then projection to |q| ≤ 1
            let d_ref = &d;
            qx.par_chunks_mut(w).zip(qy.par_chunks_mut(w)).enumerate().for_each(|(y, (qxr, qyr))| {
                for x in 0..w {
                    let i = y * w + x;
                    let gx = if x + 1 < w { d_ref[i + 1] - d_ref[i] } else { T::zero() };
                    let gy = if y + 1 < h { d_ref[i + w] - d_ref[i] } else { T::zero() };
                    let nx = (qxr[x] + sigma * gx) / (T::one() + sigma * eps);
                    let ny = (qyr[x] + sigma * gy) / (T::one() + sigma * eps);
                    let m = (nx * nx + ny * ny).sqrt().max(T::one());
                    qxr[x] = nx / m;
                    qyr[x] = ny / m;
                }
            });
            // primal descent towards the coupled auxiliary field
            let (qx_ref, qy_ref, a_ref) = (&qx, &qy, &a);
            d.par_chunks_mut(w).enumerate().for_each(|(y, dr)| {
                for x in 0..w {
                    let i = y * w + x;
                    let mut div = T::zero();
                    div += if x + 1 < w { qx_ref[i] } else { T::zero() };
                    div -= if x > 0 { qx_ref[i - 1] } else { T::zero() };
                    div += if y + 1 < h { qy_ref[i] } else { T::zero() };
                    div -= if y > 0 { qy_ref[i - w] } else { T::zero() };
                    let v = (dr[x] + tau * (div + a_ref[i] / th)) / (T::one() + tau / th);
                    dr[x] = v.max(rmin).min(rmax);
                }
            });
        }
        let d_ref = &d;
        a.par_chunks_mut(w).enumerate().for_each(|(y, ar)| {
            for x in 0..w {
                ar[x] = search(cv.pixel_costs(x, y), d_ref[y * w + x], th, weight, &rhos, step).max(rmin).min(rmax);
            }
        });

        let prev = best_e;
        for candidate in [&d, &a] {
            let e = energy(cv, grid, candidate, cfg);
            if !e.is_finite() {
                return Err(Error::Numerical(format!("energy became {e} at outer iteration {n} (theta {theta:e})")));
            }
            if e < best_e {
                best_e = e;
                best.copy_from_slice(candidate);
            }
        }
        trace.push(best_e);
        let at_end = theta <= cfg.theta.end;
        theta = (theta * cfg.theta.decay).max(cfg.theta.end);
        if at_end && (prev - best_e).abs() <= cfg.tolerance * prev.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }

    let confidence = cv
        .costs()
        .chunks_exact(cv.k_bins())
        .map(|curve| {
            let min = curve.iter().copied().fold(T::infinity(), |m, c| m.min(c));
            let mean = curve.iter().copied().fold(T::zero(), |s, c| s + c) / T::of_usize(curve.len());
            if mean > T::zero() {
                T::one() - min / mean
            } else {
                T::zero()
            }
        })
        .collect();
    Ok(Regularized { field: InverseDepthField { width: w, height: h, values: best, confidence, valid: wta.valid }, energy_trace: trace, outer_iters: iters })
}

pub fn write_energy_csv<W: Write>(trace: &[f64], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "outer_iter,energy")?;
    for (i, e) in trace.iter().enumerate() {
        writeln!(out, "{i},{e}")?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub metrics: DepthMetrics,
}

pub const SWEEP_CSV_HEADER: &str = "lambda,rmse,log,absrel,sqrel,d1,d2,d3";

/// One full minimization per λ, scored against ground-truth depth.
pub fn lambda_sweep<T: Real>(
    cv: &CostVolume<T>,
    grid: &InverseDepthGrid<T>,
    base: &RegularizerConfig,
    lambdas: &[f64],
    gt_depth: &DepthMap<T>,
    log_metric: LogMetric,
) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() {
        return Err(Error::Domain("empty lambda list".into()));
    }
    if gt_depth.valid_count() == 0 {
        return Err(Error::Data("ground truth has no valid pixel".into()));
    }
    lambdas
        .iter()
        .map(|&lambda| {
            let cfg = RegularizerConfig { lambda, ..*base };
            let out = minimize_energy(cv, grid, &cfg)?;
            let metrics = evaluate_with(&out.field.depth_map(), gt_depth, log_metric)?;
            Ok(SweepRow { lambda, metrics })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "{SWEEP_CSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{}", r.lambda, r.metrics.csv_row())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::evaluate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> InverseDepthGrid<f64> {
        InverseDepthGrid::new(32, 0.0, 1.0).unwrap()
    }

    /// `|ρ_l − ρ*(x, y)|·slope` plus uniform noise; a fraction of pixels get
    /// a spurious deep minimum at a random bin.
    fn volume(w: usize, h: usize, truth: impl Fn(usize, usize) -> f64, noise: f64, outliers: f64, seed: u64) -> CostVolume<f64> {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cost = Vec::with_capacity(w * h * 32);
        for y in 0..h {
            for x in 0..w {
                let r = truth(x, y);
                let spurious = (rng.random_range(0.0..1.0) < outliers).then(|| rng.random_range(0..32));
                for l in 0..32 {
                    let mut c = 20.0 * (g.rho(l) - r).abs() + noise * rng.random_range(0.0..1.0);
                    if spurious == Some(l) {
                        c -= 5.0;
                    }
                    cost.push(c.max(0.0));
                }
            }
        }
        CostVolume::from_costs(w, h, 32, cost, vec![1; w * h]).unwrap()
    }

    fn wta_depth(cv: &CostVolume<f64>) -> DepthMap<f64> {
        winner_take_all(cv).depth(&grid())
    }

    fn plane_gt(w: usize, h: usize, rho: f64) -> DepthMap<f64> {
        DepthMap::from_values(w, h, vec![1.0 / rho; w * h]).unwrap()
    }

    #[test]
    fn energy_by_hand() {
        let g = InverseDepthGrid::new(3, 0.0, 2.0).unwrap();
        let cv = CostVolume::from_costs(2, 1, 3, vec![4.0, 2.0, 0.0, 1.0, 3.0, 5.0], vec![1, 1]).unwrap();
        let cfg = RegularizerConfig { lambda: 2.0, huber_eps: 0.1, ..Default::default() };
        // pixel 0 at ρ = 1.5: C̃ = 1, grad 0.5 − 1.5 = −1 → huber 0.95
        // pixel 1 at ρ = 0.5: C̃ = 2, border → 0
        let e = energy(&cv, &g, &[1.5, 0.5], &cfg);
        assert!((e - (0.5 * 1.0 + 0.95 + 0.5 * 2.0)).abs() < 1e-12, "{e}");
        // quadratic Huber branch
        let e = energy(&cv, &g, &[1.0, 1.05], &cfg);
        let expect = 0.5 * 2.0 + 0.5 * 0.05f64.powi(2) / 0.1 + 0.5 * 3.1;
        assert!((e - expect).abs() < 1e-12, "{e} vs {expect}");
    }

    #[test]
    fn tiny_lambda_reproduces_winner_take_all() {
        let cv = volume(12, 10, |x, y| 0.2 + 0.05 * ((x * 7 + y * 3) % 11) as f64, 2.0, 0.2, 1);
        let g = grid();
        let cfg = RegularizerConfig { lambda: 1e-6, ..Default::default() };
        let out = minimize_energy(&cv, &g, &cfg).unwrap();
        let wta = winner_take_all(&cv);
        for (i, &r) in out.field.values.iter().enumerate() {
            let curve = &cv.costs()[i * 32..(i + 1) * 32];
            let mut sorted = curve.to_vec();
            sorted.sort_by(f64::total_cmp);
            if sorted[1] - sorted[0] < 1e-3 {
                continue;
            }
            assert_eq!(g.nearest_bin(r).0, wta.bins[i], "pixel {i}");
        }
    }

    #[test]
    fn noisy_plane_improves_on_wta() {
        let (w, h) = (24, 20);
        let cv = volume(w, h, |_, _| 0.5, 6.0, 0.15, 2);
        let g = grid();
        let gt = plane_gt(w, h, 0.5);
        let wta_rms = evaluate(&wta_depth(&cv), &gt).unwrap().rms;
        let out = minimize_energy(&cv, &g, &RegularizerConfig { lambda: 20.0, ..Default::default() }).unwrap();
        let reg_rms = evaluate(&out.field.depth_map(), &gt).unwrap().rms;
        assert!(reg_rms <= wta_rms, "{reg_rms} > {wta_rms}");
        assert!(out.energy_trace.windows(2).all(|p| p[1] <= p[0] + 1e-9));
        assert!(out.energy_trace.last() < out.energy_trace.first());
        assert!(out.field.values.iter().all(|&r| (0.0..=1.0).contains(&r)));
    }

    #[test]
    fn smooth_minima_are_kept() {
        let (w, h) = (24, 20);
        let truth = |x: usize, y: usize| 0.3 + 0.01 * x as f64 + 0.004 * y as f64;
        let cv = volume(w, h, truth, 0.0, 0.0, 3);
        let g = grid();
        let wta = winner_take_all(&cv).inverse_depth(&g);
        let out = minimize_energy(&cv, &g, &RegularizerConfig { lambda: 1.0, ..Default::default() }).unwrap();
        let half = 0.5 * g.bin_width();
        let close = out.field.values.iter().zip(&wta.values).filter(|(a, b)| (*a - *b).abs() <= half).count();
        assert!(close as f64 >= 0.99 * (w * h) as f64, "{close} of {}", w * h);
        assert!(out.energy_trace.windows(2).all(|p| p[1] <= p[0] + 1e-9));
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let cv = volume(16, 12, |x, _| 0.3 + 0.02 * x as f64, 4.0, 0.1, 4);
        let g = grid();
        let cfg = RegularizerConfig { lambda: 5.0, ..Default::default() };
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| minimize_energy(&cv, &g, &cfg).unwrap())
        };
        let a = run(1);
        let b = run(3);
        assert_eq!(a.field.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.field.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.energy_trace.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.energy_trace.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn sweep_rows_match_direct_runs() {
        let (w, h) = (16, 12);
        let cv = volume(w, h, |_, _| 0.5, 6.0, 0.15, 5);
        let g = grid();
        let gt = plane_gt(w, h, 0.5);
        let base = RegularizerConfig::default();
        let rows = lambda_sweep(&cv, &g, &base, &[3.0, 3.0, 30.0], &gt, LogMetric::Rms).unwrap();
        assert_eq!(rows[0], rows[1]);
        let direct = minimize_energy(&cv, &g, &RegularizerConfig { lambda: 30.0, ..base }).unwrap();
        assert_eq!(rows[2].metrics, evaluate(&direct.field.depth_map(), &gt).unwrap());
        assert!(lambda_sweep(&cv, &g, &base, &[], &gt, LogMetric::Rms).is_err());
        let mut csv = Vec::new();
        write_sweep_csv(&rows, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().next(), Some(SWEEP_CSV_HEADER));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn rejects_bad_input() {
        let g = grid();
        let cv = volume(4, 4, |_, _| 0.5, 0.0, 0.0, 6);
        assert!(minimize_energy(&cv, &g, &RegularizerConfig { lambda: 0.0, ..Default::default() }).is_err());
        assert!(minimize_energy(&cv, &g, &RegularizerConfig { huber_eps: -1.0, ..Default::default() }).is_err());
        let mut costs = cv.costs().to_vec();
        costs[..32].iter_mut().for_each(|c| *c = f64::MAX / 2.0);
        let huge = CostVolume::from_costs(4, 4, 32, costs, vec![1; 16]).unwrap();
        let cfg = RegularizerConfig { lambda: 1e-3, ..Default::default() };
        assert!(matches!(minimize_energy(&huge, &g, &cfg), Err(Error::Numerical(_))));
        let other = InverseDepthGrid::new(8, 0.0, 1.0).unwrap();
        assert!(minimize_energy(&cv, &other, &RegularizerConfig::default()).is_err());
        let mut csv = Vec::new();
        write_energy_csv(&[3.0, 2.5], &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap(), "outer_iter,energy\n0,3\n1,2.5\n");
    }
}
