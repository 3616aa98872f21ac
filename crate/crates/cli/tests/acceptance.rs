//! Acceptance checks, one line per criterion. Runs as a plain binary
//! (`harness = false`) so the report is printed even when everything passes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use densematch::costvolume::{
    build_cost_volume, softmax_distribution, winner_take_all, wta_accuracy, CostVolumeOptions, MatchNorm,
};
use densematch::dataio::{make_training_pairs, synth_scene, SceneKind, SynthParams, TrainingPair};
use densematch::features::rgb_features;
use densematch::geometry::{backproject, epipolar_samples, project, Mat3, Vec3};
use densematch::learning::{
    deep_supervised_loss, matching_loss, train, ExtractorConfig, ExtractorParams, LossWeights, PairGeometry,
    PairSupervision, TrainConfig,
};
use densematch::metrics::{evaluate, DepthMetrics, LogMetric};
use densematch::regularizer::{lambda_sweep, minimize_energy, write_sweep_csv, RegularizerConfig};
use densematch::{CameraIntrinsics, DepthMap, Error, FeatureMap, InverseDepthGrid, Pose, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn main() {
    println!(
        "criterion 1: NOT REPRODUCIBLE (full-scale NYUv2 accuracy needs GPU training of a full-size network on the whole dataset; \
         replaced by the property checks below)"
    );
    let criteria: [(u8, &str, fn() -> Outcome); 7] = [
        (2, "gradient correctness", criterion_2),
        (3, "cost volume and softmax oracle", criterion_3),
        (4, "geometry", criterion_4),
        (5, "learned features beat RGB on repeated texture", criterion_5),
        (6, "regularizer", criterion_6),
        (7, "metrics", criterion_7),
        (8, "determinism across --threads", criterion_8),
    ];
    // `cargo test --test acceptance -- 2 8` runs a subset
    let only: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let o = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failed += !o.pass as usize;
        println!(
            "criterion {n}: {} ({name}, {:.1}s) {}",
            if o.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            o.detail
        );
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// shared fixtures

fn rotation(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = axis.map(|a| a / n);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

fn random_pose(rng: &mut ChaCha8Rng, max_angle: f64, max_shift: f64) -> ([[f64; 3]; 3], [f64; 3]) {
    let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0)];
    let r = rotation(axis, rng.random_range(-max_angle..max_angle));
    let t = [
        rng.random_range(-max_shift..max_shift),
        rng.random_range(-max_shift..max_shift) * 0.3,
        rng.random_range(-max_shift..max_shift) * 0.3,
    ];
    (r, t)
}

fn to_pose(r: &[[f64; 3]; 3], t: &[f64; 3]) -> Pose<f64> {
    Pose::new(Mat3::from_rows(*r), Vec3::new(t[0], t[1], t[2])).unwrap()
}

fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> FeatureMap<f64> {
    FeatureMap::from_fn(w, h, c, |_, _, _| rng.random_range(-1.0..1.0))
}

// ---------------------------------------------------------------------------
// 2. analytic gradients against central differences

fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / an.abs().max(1.0)
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let weights = LossWeights::default();
    let (mut instances, mut desc_entries, mut params_checked, mut params_skipped) = (0, 0usize, 0usize, 0usize);
    let (mut worst_desc, mut worst_param) = (0.0f64, 0.0f64);

    while instances < 100 {
        let (w, h) = (rng.random_range(5..=8usize), rng.random_range(5..=8usize));
        let k = rng.random_range(2..=8usize);
        let c = rng.random_range(1..=4usize);
        let f = rng.random_range(4.0..8.0);
        let intr = CameraIntrinsics::new(
            f,
            f * rng.random_range(0.9..1.1),
            (w as f64 - 1.0) / 2.0 + rng.random_range(-0.5..0.5),
            (h as f64 - 1.0) / 2.0 + rng.random_range(-0.5..0.5),
            w,
            h,
        )
        .unwrap();
        let (r, t) = random_pose(&mut rng, 0.05, 0.4);
        let pose = to_pose(&r, &t);
        let rho_max = rng.random_range(1.0..4.0);
        let grid = InverseDepthGrid::new(k, 0.0, rho_max).unwrap();
        let gt_values: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.0..rho_max)).collect();
        let gt_valid: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.9)).collect();
        let gt = DepthMap::new(w, h, gt_values, gt_valid).unwrap();

        // descriptors
        let f_ref = random_map(&mut rng, w, h, c);
        let f_live = random_map(&mut rng, w, h, c);
        let geom = PairGeometry { relative_pose: pose, intrinsics: intr, gt_inverse_depth: &gt };
        let m = match matching_loss(&f_ref, &f_live, &geom, &grid, &weights, MatchNorm::SquaredL2) {
            Ok(m) => m,
            Err(Error::Data(_)) => continue,
            Err(e) => return outcome(false, format!("instance {instances}: {e}")),
        };
        let loss = |a: &FeatureMap<f64>, b: &FeatureMap<f64>| {
            matching_loss(a, b, &geom, &grid, &weights, MatchNorm::SquaredL2).unwrap().total
        };
        let hd = 1e-5;
        for live in [false, true] {
            let (base, grad) = if live { (&f_live, &m.grad_live) } else { (&f_ref, &m.grad_ref) };
            for i in 0..base.data().len() {
                let (mut plus, mut minus) = (base.clone(), base.clone());
                plus.data_mut()[i] += hd;
                minus.data_mut()[i] -= hd;
                let fd = if live {
                    (loss(&f_ref, &plus) - loss(&f_ref, &minus)) / (2.0 * hd)
                } else {
                    (loss(&plus, &f_live) - loss(&minus, &f_live)) / (2.0 * hd)
                };
                worst_desc = worst_desc.max(rel_err(fd, grad.data()[i]));
                desc_entries += 1;
            }
        }

        // extractor parameters, through the deeply supervised loss
        let cfg = ExtractorConfig {
            blocks: rng.random_range(1..=2usize),
            channels: rng.random_range(1..=3usize),
            first_stride: rng.random_range(1..=2usize),
        };
        let img = |rng: &mut ChaCha8Rng| {
            RgbImage::new(w, h, (0..w * h * 3).map(|_| rng.random_range(100..156u8)).collect()).unwrap()
        };
        let (img_ref, img_live) = (img(&mut rng), img(&mut rng));
        let params = ExtractorParams::<f64>::xavier(cfg, [128.0; 3], rng.random()).unwrap();
        let taps = vec![1.0; cfg.tap_count()];
        let sup = PairSupervision { relative_pose: pose, intrinsics: intr, gt_inverse_depth: &gt };
        let eval = |p: &ExtractorParams<f64>| -> densematch::Result<f64> {
            let (a, _) = p.forward(&p.input_features(&img_ref))?;
            let (b, _) = p.forward(&p.input_features(&img_live))?;
            Ok(deep_supervised_loss(&a, &b, &sup, &grid, &weights, &taps, MatchNorm::SquaredL2)?.total)
        };
        let (a, ca) = params.forward(&params.input_features(&img_ref)).unwrap();
        let (b, cb) = params.forward(&params.input_features(&img_live)).unwrap();
        let d = match deep_supervised_loss(&a, &b, &sup, &grid, &weights, &taps, MatchNorm::SquaredL2) {
            Ok(d) => d,
            Err(Error::Data(_)) => continue,
            Err(e) => return outcome(false, format!("instance {instances}: {e}")),
        };
        let g_ref = params.backward(&ca, &d.grad_ref).unwrap().flatten();
        let g_live = params.backward(&cb, &d.grad_live).unwrap().flatten();
        let theta = params.flatten();
        let pattern = |q: &ExtractorParams<f64>| {
            let mut p = q.forward(&q.input_features(&img_ref)).unwrap().1.relu_pattern();
            p.extend(q.forward(&q.input_features(&img_live)).unwrap().1.relu_pattern());
            p
        };
        let base_pattern = [ca.relu_pattern(), cb.relu_pattern()].concat();
        for i in 0..theta.len() {
            let an = g_ref[i] + g_live[i];
            let shifted = |s: f64| {
                let mut v = theta.clone();
                v[i] += s;
                let mut q = params.clone();
                q.set_flat(&v).unwrap();
                q
            };
            // 1e-5 balances truncation against rounding on losses up to ~1e5;
            // the smaller step is a fallback when a ReLU switches within the
            // larger one. If it switches within both, the derivative is
            // undefined at this point.
            let step = [1e-5, 1e-6].into_iter().find_map(|h| {
                let (qp, qm) = (shifted(h), shifted(-h));
                (pattern(&qp) == base_pattern && pattern(&qm) == base_pattern).then_some((h, qp, qm))
            });
            let Some((hp, qp, qm)) = step else {
                params_skipped += 1;
                continue;
            };
            let fd = (eval(&qp).unwrap() - eval(&qm).unwrap()) / (2.0 * hp);
            worst_param = worst_param.max(rel_err(fd, an));
            params_checked += 1;
        }
        instances += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    let skip_rate = params_skipped as f64 / (params_checked + params_skipped) as f64;
    let pass = worst_desc <= 1e-4 && worst_param <= 1e-4 && secs < 60.0 && skip_rate < 0.05;
    outcome(
        pass,
        format!(
            "{instances} instances; {desc_entries} descriptor entries, worst rel err {worst_desc:.2e}; \
             {params_checked} parameter entries, worst rel err {worst_param:.2e}, {params_skipped} at ReLU kinks \
             ({:.2}%); {secs:.1}s of 60s",
            100.0 * skip_rate
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. cost volume against a per-pixel scalar oracle

/// Straight-line re-derivation: back-project, transform, project, bilinear
/// sample, average over frames that see the point.
fn oracle_volume(
    f_ref: &FeatureMap<f64>,
    lives: &[(FeatureMap<f64>, [[f64; 3]; 3], [f64; 3])],
    k: usize,
    rho_range: (f64, f64),
    cam: [f64; 4],
    l1: bool,
) -> (Vec<f64>, Vec<u32>) {
    let (w, h, c) = (f_ref.width(), f_ref.height(), f_ref.channels());
    let [fx, fy, cx, cy] = cam;
    let mut cost = Vec::new();
    let mut support = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let mut min_n = u32::MAX;
            for l in 0..k {
                let rho = rho_range.0 + l as f64 * (rho_range.1 - rho_range.0) / (k as f64 - 1.0);
                let ray = [(x as f64 - cx) / fx, (y as f64 - cy) / fy, 1.0];
                let mut total = 0.0;
                let mut n = 0u32;
                for (fm, r, t) in lives {
                    let p: Vec<f64> = (0..3).map(|i| r[i][0] * ray[0] + r[i][1] * ray[1] + r[i][2] * ray[2] + rho * t[i]).collect();
                    if p[2] <= 1e-6 * rho {
                        continue;
                    }
                    let u = fx * p[0] / p[2] + cx;
                    let v = fy * p[1] / p[2] + cy;
                    if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
                        continue;
                    }
                    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
                    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                    let (ax, ay) = (u - x0 as f64, v - y0 as f64);
                    let mut d = 0.0;
                    for ch in 0..c {
                        let s = (1.0 - ax) * (1.0 - ay) * fm.texel(x0, y0)[ch]
                            + ax * (1.0 - ay) * fm.texel(x1, y0)[ch]
                            + (1.0 - ax) * ay * fm.texel(x0, y1)[ch]
                            + ax * ay * fm.texel(x1, y1)[ch];
                        let e = f_ref.texel(x, y)[ch] - s;
                        d += if l1 { e.abs() } else { e * e };
                    }
                    total += d;
                    n += 1;
                }
                cost.push(if n == 0 { 10.0 } else { total / n as f64 });
                min_n = min_n.min(n);
            }
            support.push(min_n);
        }
    }
    (cost, support)
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_cost, mut worst_sum, mut worst_softmax) = (0.0f64, 0.0f64, 0.0f64);
    let mut support_mismatch = 0;
    let mut volumes = 0;
    for trial in 0..6 {
        let (w, h, k, c) = (16, 16, 32, rng.random_range(1..=4usize));
        let cam = [rng.random_range(10.0..20.0), rng.random_range(10.0..20.0), 7.5, 7.5];
        let intr = CameraIntrinsics::new(cam[0], cam[1], cam[2], cam[3], w, h).unwrap();
        let rho_range = (if trial % 2 == 0 { 0.0 } else { 0.2 }, rng.random_range(1.0..4.0));
        let grid = InverseDepthGrid::new(k, rho_range.0, rho_range.1).unwrap();
        let f_ref = random_map(&mut rng, w, h, c);
        let lives: Vec<_> = (0..4)
            .map(|_| {
                let (r, t) = random_pose(&mut rng, 0.1, 0.3);
                (random_map(&mut rng, w, h, c), r, t)
            })
            .collect();
        let poses: Vec<_> = lives.iter().map(|(fm, r, t)| (fm, to_pose(r, t))).collect();
        for norm in [MatchNorm::L1, MatchNorm::SquaredL2] {
            let cv = build_cost_volume(&f_ref, &poses, &grid, &intr, &CostVolumeOptions { norm, ..Default::default() })
                .unwrap();
            let (cost, support) = oracle_volume(&f_ref, &lives, k, rho_range, cam, norm == MatchNorm::L1);
            for (a, b) in cv.costs().iter().zip(&cost) {
                worst_cost = worst_cost.max((a - b).abs());
            }
            support_mismatch += cv.support().iter().zip(&support).filter(|(a, b)| a != b).count();
            let dist = softmax_distribution(&cv);
            for (row, costs) in dist.prob.chunks(k).zip(cv.costs().chunks(k)) {
                worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
                let z: f64 = costs.iter().map(|c| (-c).exp()).sum();
                for (p, c) in row.iter().zip(costs) {
                    worst_softmax = worst_softmax.max((p - (-c).exp() / z).abs());
                }
            }
            volumes += 1;
        }
    }
    let pass = worst_cost <= 1e-6 && support_mismatch == 0 && worst_sum <= 1e-6 && worst_softmax <= 1e-6;
    outcome(
        pass,
        format!(
            "{volumes} volumes of 16x16x32 with 4 live frames; max cost diff {worst_cost:.1e}, \
             {support_mismatch} support mismatches, max |row sum - 1| {worst_sum:.1e}, \
             max softmax diff {worst_softmax:.1e}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. projection, epipolar lines and the identity sweep

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let intr = CameraIntrinsics::new(525.0, 525.0, 319.5, 239.5, 640, 480).unwrap();
    let mut worst_px = 0.0f64;
    for _ in 0..10_000 {
        let (u, v): (f64, f64) = (rng.random_range(0.0..639.0), rng.random_range(0.0..479.0));
        let rho = rng.random_range(0.05..5.0);
        let p = backproject(u, v, rho, &intr).unwrap().to_euclidean().unwrap();
        let q = project(&p, &intr);
        worst_px = worst_px.max((q.u - u).abs().max((q.v - v).abs()));
    }

    let mut worst_line = 0.0f64;
    let grid = InverseDepthGrid::new(64, 0.0, 5.0).unwrap();
    for _ in 0..500 {
        let (r, t) = random_pose(&mut rng, 0.2, 0.5);
        let pose = to_pose(&r, &t);
        let (u, v) = (rng.random_range(0.0..639.0), rng.random_range(0.0..479.0));
        let pts: Vec<(f64, f64)> = epipolar_samples(u, v, &grid, &pose, &intr, &intr)
            .unwrap()
            .into_iter()
            .filter(|s| s.u.is_finite() && s.v.is_finite() && s.u.abs() < 1e5 && s.v.abs() < 1e5)
            .map(|s| (s.u, s.v))
            .collect();
        if pts.len() < 3 {
            continue;
        }
        // line through the two samples farthest apart
        let (mut a, mut b, mut best) = (pts[0], pts[1], 0.0);
        for &p in &pts {
            for &q in &pts {
                let d = (p.0 - q.0).hypot(p.1 - q.1);
                if d > best {
                    (a, b, best) = (p, q, d);
                }
            }
        }
        if best < 1e-3 {
            continue;
        }
        for &p in &pts {
            let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            worst_line = worst_line.max(cross.abs() / best);
        }
    }

    let f = random_map(&mut rng, 16, 12, 3);
    let small = CameraIntrinsics::new(12.0, 12.0, 7.5, 5.5, 16, 12).unwrap();
    let g = InverseDepthGrid::new(32, 0.0, 4.0).unwrap();
    let mut self_cost = 0.0f64;
    for norm in [MatchNorm::L1, MatchNorm::SquaredL2] {
        let cv = build_cost_volume(&f, &[(&f, Pose::identity())], &g, &small, &CostVolumeOptions { norm, ..Default::default() })
            .unwrap();
        self_cost = self_cost.max(cv.costs().iter().fold(0.0, |m, c| m.max(c.abs())));
    }
    let pass = worst_px < 1e-9 && worst_line < 1e-6 && self_cost == 0.0;
    outcome(
        pass,
        format!(
            "round trip max {worst_px:.1e} px; epipolar residual max {worst_line:.1e} px; \
             identity self-match max cost {self_cost}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. repeated texture: learned features against RGB

const C5_BINS: usize = 32;
const C5_RHO_MAX: f64 = 1.0;

/// Striped slanted plane seen by two cameras 0.58 m apart: stripes of 6 px
/// repeat many times along the epipolar line, a faint non-periodic pattern
/// and sensor noise ride on top. Depth and slant vary with the seed.
fn repeated_texture(seed: u64, noise: f64, context: f64) -> SynthParams {
    let mut p = SynthParams::new(SceneKind::RepeatedTexture);
    p.width = 48;
    p.height = 40;
    p.focal = 40.0;
    p.frames = 2;
    p.step = Vec3::new(0.58, 0.0, 0.0);
    p.seed = seed;
    p.plane_depth = 1.4 + ((seed * 2654435761) % 1000) as f64 / 1000.0;
    p.slant = 0.3 * (((seed * 40503) % 1000) as f64 / 500.0 - 1.0);
    p.stripe_period_px = 6.0;
    p.stripe_amplitude = 40.0;
    p.context_amplitude = context;
    p.noise_sigma = noise;
    p
}

fn pair_accuracy(
    a: &FeatureMap<f64>,
    b: &FeatureMap<f64>,
    pair: &TrainingPair,
    intr: &CameraIntrinsics<f64>,
    grid: &InverseDepthGrid<f64>,
) -> f64 {
    let cv = build_cost_volume(a, &[(b, pair.relative_pose)], grid, intr, &CostVolumeOptions::default()).unwrap();
    wta_accuracy(&winner_take_all(&cv), &pair.gt_inverse_depth, grid, 1).unwrap().unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let grid = InverseDepthGrid::new(C5_BINS, 0.0, C5_RHO_MAX).unwrap();
    let rgb_mean = [128.0; 3];
    let mut pairs = Vec::new();
    let mut intr = None;
    for s in 100..228 {
        let seq = synth_scene(&repeated_texture(s, 12.0, 15.0)).unwrap();
        intr = Some(seq.intrinsics);
        pairs.extend(make_training_pairs(&seq, 1, C5_RHO_MAX));
    }
    let intr = intr.unwrap();
    let held: Vec<TrainingPair> = (9000..9004)
        .flat_map(|s| make_training_pairs(&synth_scene(&repeated_texture(s, 12.0, 15.0)).unwrap(), 1, C5_RHO_MAX))
        .collect();
    let rgb: Vec<f64> = held
        .iter()
        .map(|p| pair_accuracy(&rgb_features(&p.reference, rgb_mean), &rgb_features(&p.live, rgb_mean), p, &intr, &grid))
        .collect();

    // without noise and context the stripes alone leave several equally good
    // matches per pixel
    let clean: Vec<f64> = (9000..9004)
        .flat_map(|s| make_training_pairs(&synth_scene(&repeated_texture(s, 0.0, 0.0)).unwrap(), 1, C5_RHO_MAX))
        .map(|p| pair_accuracy(&rgb_features(&p.reference, rgb_mean), &rgb_features(&p.live, rgb_mean), &p, &intr, &grid))
        .collect();

    let cfg = TrainConfig {
        extractor: ExtractorConfig { blocks: 3, channels: 8, first_stride: 1 },
        grid_bins: C5_BINS,
        rho_min: 0.0,
        rho_max: C5_RHO_MAX,
        iterations: 2000,
        learning_rate: 1e-3,
        batch_pairs: 1,
        seed: 1,
        ..TrainConfig::default()
    };
    let trained = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| train::<f64>(&pairs, &intr, rgb_mean, &cfg));
    let params = match trained {
        Ok(o) => o.params,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let learned: Vec<f64> = held
        .iter()
        .map(|p| {
            let a = params.extract(&p.reference).unwrap();
            let b = params.extract(&p.live).unwrap();
            pair_accuracy(a.output(), b.output(), p, &intr, &grid)
        })
        .collect();
    let secs = start.elapsed().as_secs_f64();
    let (r, l) = (mean(&rgb), mean(&learned));
    let pass = r < 0.6 && l - r >= 0.15 && secs < 600.0;
    outcome(
        pass,
        format!(
            "held-out WTA accuracy within 1 bin: RGB {:.1}% {rgb:.3?}, learned {:.1}% {learned:.3?}, \
             gain {:+.1} pp (noiseless RGB {:.1}%); {} training pairs, 2000 iterations, single thread, {secs:.0}s",
            100.0 * r,
            100.0 * l,
            100.0 * (l - r),
            100.0 * mean(&clean),
            pairs.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. regularizer energy, noisy plane and λ sweep

fn rgb_volume(p: &SynthParams, grid: &InverseDepthGrid<f64>) -> (densematch::CostVolume<f64>, DepthMap<f64>) {
    let seq = synth_scene(p).unwrap();
    let mean = seq.mean_color();
    let r = seq.frames.len() / 2;
    let feats: Vec<_> = seq.frames.iter().map(|f| rgb_features(&f.rgb, mean)).collect();
    let reference = &seq.frames[r];
    let lives: Vec<_> = seq
        .frames
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != r)
        .map(|(i, f)| (&feats[i], Pose::relative(&f.world_from_camera, &reference.world_from_camera)))
        .collect();
    let cv = build_cost_volume(&feats[r], &lives, grid, &seq.intrinsics, &CostVolumeOptions::default()).unwrap();
    (cv, reference.depth.clone())
}

fn criterion_6() -> Outcome {
    let grid = InverseDepthGrid::new(64, 0.0, 1.0).unwrap();
    let mut fixtures = Vec::new();
    for kind in [SceneKind::TexturedPlane, SceneKind::RepeatedTexture, SceneKind::SteppedBoxes] {
        for noise in [0.0, 30.0] {
            let mut p = SynthParams::new(kind);
            p.frames = 5;
            p.noise_sigma = noise;
            p.seed = 6;
            fixtures.push((format!("{kind}/noise{noise}"), p));
        }
    }
    let mut worst_rise = f64::NEG_INFINITY;
    let mut runs = 0;
    for (_, p) in &fixtures {
        let (cv, _) = rgb_volume(p, &grid);
        for lambda in [1.0, 30.0, 300.0] {
            let out = minimize_energy(&cv, &grid, &RegularizerConfig { lambda, ..Default::default() }).unwrap();
            for w in out.energy_trace.windows(2) {
                worst_rise = worst_rise.max(w[1] - w[0]);
            }
            runs += 1;
        }
    }
    let monotone = worst_rise <= 1e-9;

    let mut noisy = SynthParams::new(SceneKind::TexturedPlane);
    noisy.frames = 5;
    noisy.noise_sigma = 30.0;
    noisy.seed = 6;
    let (cv, gt) = rgb_volume(&noisy, &grid);
    let wta = winner_take_all(&cv).depth(&grid);
    let wta_rms = evaluate(&wta, &gt).unwrap().rms;
    let reg = minimize_energy(&cv, &grid, &RegularizerConfig { lambda: 100.0, ..Default::default() }).unwrap();
    let reg_rms = evaluate(&reg.field.depth_map(), &gt).unwrap().rms;

    let lambdas = [1.0, 10.0, 30.0, 100.0, 300.0, 1000.0, 10000.0];
    let rows = lambda_sweep(&cv, &grid, &RegularizerConfig::default(), &lambdas, &gt, LogMetric::Rms).unwrap();
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    let csv = dir.join("lambda_sweep.csv");
    let mut file = std::fs::File::create(&csv).unwrap();
    write_sweep_csv(&rows, &mut file).unwrap();
    let finite = rows.iter().all(|r| r.metrics.rms.is_finite());
    let curve: Vec<String> = rows.iter().map(|r| format!("{}:{:.3}", r.lambda, r.metrics.rms)).collect();

    let pass = monotone && reg_rms <= wta_rms && finite;
    outcome(
        pass,
        format!(
            "{runs} runs on {} fixtures, largest energy increase {worst_rise:.1e}; noisy plane RMSE WTA {wta_rms:.4} m, \
             regularized (λ=100) {reg_rms:.4} m; sweep RMSE {} written to {}",
            fixtures.len(),
            curve.join(" "),
            csv.display()
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. metrics

fn criterion_7() -> Outcome {
    let map = |v: Vec<f64>| DepthMap::from_values(v.len(), 1, v).unwrap();
    let gt = map(vec![0.8, 1.5, 2.25, 3.0, 4.4]);
    let id = evaluate(&gt, &gt).unwrap();
    let identity = id.rms == 0.0 && id.delta1 == 1.0;

    let base = map(vec![1.0, 2.0, 4.0]);
    let scaled = map(vec![1.25, 2.5, 5.0]);
    let b = evaluate(&scaled, &base).unwrap();
    let boundary = b.delta1 == 0.0 && b.delta2 == 1.0;

    let m = evaluate(&map(vec![1.1, 1.8]), &map(vec![1.0, 2.0])).unwrap();
    let expected = DepthMetrics {
        rms: ((0.1f64.powi(2) + 0.2f64.powi(2)) / 2.0).sqrt(),
        log: ((1.1f64.ln().powi(2) + 0.9f64.ln().powi(2)) / 2.0).sqrt(),
        abs_rel: (0.1 / 1.0 + 0.2 / 2.0) / 2.0,
        sq_rel: (0.01 / 1.0 + 0.04 / 2.0) / 2.0,
        delta1: 1.0,
        delta2: 1.0,
        delta3: 1.0,
        pixels: 2,
    };
    let diffs = [
        m.rms - expected.rms,
        m.log - expected.log,
        m.abs_rel - expected.abs_rel,
        m.sq_rel - expected.sq_rel,
        m.delta1 - expected.delta1,
    ];
    let worst = diffs.iter().fold(0.0f64, |a, d| a.max(d.abs()));
    let hand = worst <= 1e-12 && m.pixels == 2;
    outcome(
        identity && boundary && hand,
        format!(
            "identity rms {} d1 {}; 1.25x case d1 {} d2 {}; 2-pixel case max diff {worst:.1e}",
            id.rms, id.delta1, b.delta1, b.delta2
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. byte-identical outputs for every command across thread counts

fn run_cli(dir: &Path, args: &[String]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_densematch"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    files
}

fn run_all_commands(root: &Path, threads: usize) -> Result<(), String> {
    // relative paths, so the recorded configs are comparable across roots
    let p = |s: &str| s.to_string();
    let run = |cmd: &str, extra: &[String]| {
        let mut args: Vec<String> = vec![cmd.into(), "--threads".into(), threads.to_string(), "--seed".into(), "8".into()];
        args.extend_from_slice(extra);
        run_cli(root, &args)
    };
    let v = |a: &[&str]| a.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let matching = |out: &str, ds: &str, extra: &[&str]| {
        let mut a = v(&["--dataset", &p(ds), "--out", &p(out), "--grid-bins", "48", "--rho-max", "1"]);
        a.extend(v(extra));
        a
    };
    run("synth", &v(&["--out", &p("plane"), "--frames", "6", "--noise", "10"]))?;
    run("synth", &v(&["--out", &p("stripes"), "--kind", "repeated-texture", "--frames", "4", "--noise", "10"]))?;
    run("reconstruct", &matching("rec", "plane", &["--keyframes", "all", "--lambda", "50"]))?;
    run(
        "train",
        &v(&[
            "--dataset", &format!("{},{}", p("plane"), p("stripes")), "--out", &p("net"), "--gap", "1",
            "--grid-bins", "16", "--rho-max", "1", "--iterations", "6", "--learning-rate", "1e-4", "--channels", "4",
        ]),
    )?;
    let trained = format!("trained:{}", p("net/params.bin"));
    run("reconstruct", &matching("rec_trained", "stripes", &["--features", &trained, "--lambda", "10"]))?;
    run("eval", &v(&["--pred", &p("rec/depth"), "--gt", &p("plane"), "--out", &p("eval")]))?;
    run("costcurve", &matching("curves", "stripes", &["--features", &trained, "--pixels", "3,4;20,17"]))?;
    run("sweep", &matching("sweep", "plane", &["--lambdas", "1,10,100,1000"]))?;
    Ok(())
}

fn criterion_8() -> Outcome {
    let base = tempfile::tempdir().unwrap();
    let mut snapshots = Vec::new();
    for threads in [1, 2, 4] {
        let root = base.path().join(format!("t{threads}"));
        std::fs::create_dir_all(&root).unwrap();
        if let Err(e) = run_all_commands(&root, threads) {
            return outcome(false, format!("command failed: {e}"));
        }
        snapshots.push((threads, snapshot(&root)));
    }
    let (_, reference) = &snapshots[0];
    let mut differing = Vec::new();
    for (threads, snap) in &snapshots[1..] {
        if snap.keys().ne(reference.keys()) {
            differing.push(format!("file set differs at --threads {threads}"));
            continue;
        }
        for (path, bytes) in snap {
            if reference[path] != *bytes {
                differing.push(format!("{} at --threads {threads}", path.display()));
            }
        }
    }
    outcome(
        differing.is_empty() && !reference.is_empty(),
        format!(
            "synth, reconstruct (rgb and trained), train, eval, costcurve, sweep at --threads 1/2/4: {} files each, {}",
            reference.len(),
            if differing.is_empty() { "all byte-identical".to_string() } else { format!("differences: {differing:?}") }
        ),
    )
}
