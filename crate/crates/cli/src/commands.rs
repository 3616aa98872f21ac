use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use densematch::costvolume::{build_cost_volume, winner_take_all, CostVolumeOptions, MatchNorm};
use densematch::dataio::{
    load_tum_sequence, make_training_pairs, make_window, save_tum_sequence, synth_scene, SceneKind, Sequence,
    SequenceFrame, SynthParams, DEFAULT_DEPTH_SCALE,
};
use densematch::geometry::Vec3;
use densematch::learning::{train, write_loss_history, ExtractorConfig, LossWeights, TrainConfig};
use densematch::metrics::{evaluate_with, write_table, DepthMetrics, LogMetric, CSV_HEADER};
use densematch::regularizer::{lambda_sweep, minimize_energy, write_energy_csv, write_sweep_csv, RegularizerConfig};
use densematch::{CostVolume, DepthMap, Error, InverseDepthGrid, Result};

use crate::provider::{ensure_dir, features_for, stamp, FeatureSource, MeanSpec, Provider};
use crate::settings::Settings;
use crate::{
    Cli, CliError, Command, CostcurveArgs, EvalArgs, MatchArgs, ReconstructArgs, RegularizeArgs, SweepArgs,
    SynthArgs, TrainArgs,
};

pub(crate) fn dispatch(cli: &Cli) -> std::result::Result<(), CliError> {
    let mut s = Settings::new(cli.config.as_deref())?;
    let seed = s.pick("seed", cli.seed, 0u64)?;
    match &cli.command {
        Command::Synth(a) => synth(a, seed, &mut s)?,
        Command::Reconstruct(a) => reconstruct(a, &mut s)?,
        Command::Train(a) => train_cmd(a, seed, &mut s)?,
        Command::Eval(a) => eval(a, &mut s)?,
        Command::Costcurve(a) => costcurve(a, &mut s)?,
        Command::Sweep(a) => sweep(a, &mut s)?,
    }
    Ok(())
}

fn parsed<T: FromStr<Err = Error>>(v: &Option<String>) -> Result<Option<T>> {
    v.as_deref().map(str::parse).transpose()
}

fn parse_list<T: FromStr>(s: &str, sep: char, what: &str) -> Result<Vec<T>> {
    s.split(sep)
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<T>().map_err(|_| Error::Domain(format!("bad {what} {p:?}"))))
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    body(&mut w).and_then(|_| w.flush()).map_err(|e| io_error(path, e))
}

fn synth(a: &SynthArgs, seed: u64, s: &mut Settings) -> Result<()> {
    let kind: SceneKind = s.pick("kind", parsed(&a.kind)?, SceneKind::TexturedPlane)?;
    let d = SynthParams::new(kind);
    let p = SynthParams {
        kind,
        frames: s.pick("frames", a.frames, d.frames)?,
        width: s.pick("width", a.width, d.width)?,
        height: s.pick("height", a.height, d.height)?,
        focal: s.pick("focal", a.focal, d.focal)?,
        step: Vec3::new(s.pick("baseline", a.baseline, d.step.x)?, 0.0, 0.0),
        yaw_step: s.pick("yaw_step", a.yaw_step, d.yaw_step)?,
        plane_depth: s.pick("depth", a.depth, d.plane_depth)?,
        slant: s.pick("slant", a.slant, d.slant)?,
        stripe_period_px: s.pick("period", a.period, d.stripe_period_px)?,
        stripe_amplitude: s.pick("stripe_amplitude", a.stripe_amplitude, d.stripe_amplitude)?,
        context_amplitude: s.pick("context", a.context, d.context_amplitude)?,
        noise_sigma: s.pick("noise", a.noise, d.noise_sigma)?,
        seed,
    };
    let seq = synth_scene(&p)?;
    ensure_dir(&a.out)?;
    save_tum_sequence(&seq, &a.out, DEFAULT_DEPTH_SCALE)?;
    log::info!("wrote {} frames of {kind} to {}", seq.len(), a.out.display());
    s.save(&a.out)
}

/// A loaded dataset plus everything needed to build its cost volumes.
struct Matching {
    seq: Sequence,
    provider: Provider,
    mean: [f64; 3],
    grid: InverseDepthGrid<f64>,
    norm: MatchNorm,
    window: usize,
    stride: usize,
}

/// Cost volume of one keyframe at feature resolution, with the
/// ground-truth depth resampled to match.
struct Keyframe<'a> {
    frame: &'a SequenceFrame,
    cv: CostVolume<f64>,
    factor: u32,
    gt_depth: DepthMap<f64>,
}

fn matching(a: &MatchArgs, s: &mut Settings) -> Result<Matching> {
    s.note("dataset", a.dataset.display());
    let (seq, report) = load_tum_sequence(&a.dataset)?;
    let dropped = report.dropped_without_depth + report.dropped_without_pose;
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} of {} frames without depth or pose", a.dataset.display(), report.rgb_files);
    }
    let source: FeatureSource = s.pick("features", parsed(&a.features)?, FeatureSource::Rgb)?;
    let mean_spec: MeanSpec = s.pick("mean", parsed(&a.mean)?, MeanSpec::Auto)?;
    let grid_bins = s.pick("grid_bins", a.grid_bins, 256)?;
    let rho_min = s.pick("rho_min", a.rho_min, 0.0)?;
    let rho_max = s.pick("rho_max", a.rho_max, 4.0)?;
    let norm: MatchNorm = s.pick("norm", parsed(&a.norm)?, MatchNorm::L1)?;
    let window = s.pick("window", a.window, 30)?;
    let stride = s.pick("stride", a.stride, 1)?;
    let provider = Provider::new(&source, mean_spec, &seq)?;
    let mean = match mean_spec {
        MeanSpec::Auto => seq.mean_color(),
        MeanSpec::Fixed(m) => m,
    };
    Ok(Matching { grid: InverseDepthGrid::new(grid_bins, rho_min, rho_max)?, seq, provider, mean, norm, window, stride })
}

impl Matching {
    fn keyframe(&self, provider: &Provider, index: usize) -> Result<Keyframe<'_>> {
        let win = make_window(&self.seq, index, self.window, self.stride)?;
        let mut frames = vec![win.reference];
        frames.extend(win.live.iter().map(|(_, f, _)| *f));
        let (maps, factor) = features_for(provider, &frames)?;
        let intr = self.seq.intrinsics.scaled(factor)?;
        let lives: Vec<_> = maps[1..].iter().zip(&win.live).map(|(fm, (_, _, pose))| (fm, *pose)).collect();
        let opts = CostVolumeOptions { norm: self.norm, ..Default::default() };
        let cv = build_cost_volume(&maps[0], &lives, &self.grid, &intr, &opts)?;
        let gt_depth = win.reference.depth.downsample_nearest(factor as usize);
        Ok(Keyframe { frame: win.reference, cv, factor, gt_depth })
    }

    fn keyframe_index(&self, requested: Option<usize>) -> Result<usize> {
        let i = requested.unwrap_or(self.seq.len() / 2);
        if i >= self.seq.len() {
            return Err(Error::Domain(format!("keyframe {i} outside sequence of {} frames", self.seq.len())));
        }
        Ok(i)
    }
}

fn regularizer_config(a: &RegularizeArgs, s: &mut Settings) -> Result<(f64, RegularizerConfig)> {
    let d = RegularizerConfig::default();
    let lambda = s.pick("lambda", a.lambda, d.lambda)?;
    let cfg = RegularizerConfig {
        lambda: if lambda > 0.0 { lambda } else { d.lambda },
        cost_scale: s.pick("cost_scale", a.cost_scale, d.cost_scale)?,
        huber_eps: s.pick("huber_eps", a.huber_eps, d.huber_eps)?,
        max_outer_iters: s.pick("max_iters", a.max_iters, d.max_outer_iters)?,
        ..d
    };
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::Domain(format!("lambda must be >= 0, got {lambda}")));
    }
    cfg.validate()?;
    Ok((lambda, cfg))
}

fn keyframe_list(spec: &str, len: usize) -> Result<Vec<usize>> {
    let list = match spec {
        "mid" => vec![len / 2],
        "all" => (0..len).collect(),
        other => parse_list::<usize>(other, ',', "keyframe index")?,
    };
    if list.is_empty() {
        return Err(Error::Domain("no keyframes selected".into()));
    }
    if let Some(&bad) = list.iter().find(|&&i| i >= len) {
        return Err(Error::Domain(format!("keyframe {bad} outside sequence of {len} frames")));
    }
    Ok(list)
}

fn reconstruct(a: &ReconstructArgs, s: &mut Settings) -> Result<()> {
    let m = matching(&a.matching, s)?;
    let (lambda, reg) = regularizer_config(&a.regularize, s)?;
    let keyframes = keyframe_list(&s.pick("keyframes", a.keyframes.clone(), "mid".to_string())?, m.seq.len())?;
    let log_metric = LogMetric::Rms;
    ensure_dir(&a.out.join("depth"))?;
    ensure_dir(&a.out.join("wta"))?;

    let mut rows: Vec<(String, &'static str, DepthMetrics)> = Vec::new();
    for &k in &keyframes {
        let kf = m.keyframe(&m.provider, k)?;
        let t = stamp(kf.frame.timestamp);
        let wta = winner_take_all(&kf.cv).depth(&m.grid);
        wta.save_png16(&a.out.join("wta").join(format!("{t}.png")), DEFAULT_DEPTH_SCALE)?;
        let depth = if lambda > 0.0 {
            let r = minimize_energy(&kf.cv, &m.grid, &reg)?;
            write_file(&a.out.join(format!("energy_{t}.csv")), |w| write_energy_csv(&r.energy_trace, w))?;
            log::info!("frame {t}: {} outer iterations, energy {:.6e}", r.outer_iters, r.energy_trace.last().unwrap());
            r.field.depth_map()
        } else {
            wta.clone()
        };
        depth.save_png16(&a.out.join("depth").join(format!("{t}.png")), DEFAULT_DEPTH_SCALE)?;
        if kf.gt_depth.valid_count() > 0 {
            rows.push((t.clone(), "wta", evaluate_with(&wta, &kf.gt_depth, log_metric)?));
            if lambda > 0.0 {
                rows.push((t, "regularized", evaluate_with(&depth, &kf.gt_depth, log_metric)?));
            }
        }
    }

    write_file(&a.out.join("metrics.csv"), |w| {
        writeln!(w, "frame,method,{CSV_HEADER},pixels")?;
        for (t, method, mt) in &rows {
            writeln!(w, "{t},{method},{},{}", mt.csv_row(), mt.pixels)?;
        }
        Ok(())
    })?;
    let table: Vec<(String, DepthMetrics)> = rows.iter().map(|(t, method, mt)| (format!("{t} {method}"), *mt)).collect();
    let mut stdout = std::io::stdout().lock();
    write_table(&table, &mut stdout).map_err(|e| io_error(Path::new("<stdout>"), e))?;
    s.note("provider", m.provider.name());
    s.save(&a.out)
}

fn train_cmd(a: &TrainArgs, seed: u64, s: &mut Settings) -> Result<()> {
    let d = TrainConfig::default();
    let datasets: Vec<PathBuf> = a.dataset.split(',').filter(|p| !p.is_empty()).map(PathBuf::from).collect();
    if datasets.is_empty() {
        return Err(Error::Domain("no training dataset given".into()));
    }
    s.note("dataset", &a.dataset);
    let gap = s.pick("gap", a.gap, 30usize)?;
    let tap_weights = s
        .pick_opt::<String>("tap_weights", a.tap_weights.clone())?
        .map(|w| parse_list::<f64>(&w, ',', "tap weight"))
        .transpose()?;
    let cfg = TrainConfig {
        extractor: ExtractorConfig {
            blocks: s.pick("blocks", a.blocks, d.extractor.blocks)?,
            channels: s.pick("channels", a.channels, d.extractor.channels)?,
            first_stride: s.pick("first_stride", a.first_stride, d.extractor.first_stride)?,
        },
        grid_bins: s.pick("grid_bins", a.grid_bins, d.grid_bins)?,
        rho_min: s.pick("rho_min", a.rho_min, d.rho_min)?,
        rho_max: s.pick("rho_max", a.rho_max, d.rho_max)?,
        iterations: s.pick("iterations", a.iterations, d.iterations)?,
        learning_rate: s.pick("learning_rate", a.learning_rate, d.learning_rate)?,
        momentum: s.pick("momentum", a.momentum, d.momentum)?,
        clip_norm: s.pick("clip_norm", a.clip_norm, d.clip_norm)?,
        batch_pairs: s.pick("batch_pairs", a.batch_pairs, d.batch_pairs)?,
        seed,
        loss: LossWeights {
            lambda_rho: s.pick("lambda_rho", a.lambda_rho, d.loss.lambda_rho)?,
            lambda_d: s.pick("lambda_d", a.lambda_d, d.loss.lambda_d)?,
            margin: s.pick("margin", a.margin, d.loss.margin)?,
        },
        norm: s.pick("norm", parsed(&a.norm)?, d.norm)?,
        tap_weights,
    };
    let mean_spec: MeanSpec = s.pick("mean", parsed(&a.mean)?, MeanSpec::Auto)?;
    cfg.validate()?;

    let mut pairs = Vec::new();
    let mut intrinsics = None;
    let mut mean_acc = [0.0; 3];
    for dir in &datasets {
        let (seq, _) = load_tum_sequence(dir)?;
        match &intrinsics {
            None => intrinsics = Some(seq.intrinsics),
            Some(i) if *i != seq.intrinsics => {
                return Err(Error::Data(format!("{} has different camera intrinsics", dir.display())))
            }
            _ => {}
        }
        let m = seq.mean_color();
        for c in 0..3 {
            mean_acc[c] += m[c] / datasets.len() as f64;
        }
        pairs.extend(make_training_pairs(&seq, gap, cfg.rho_max));
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!("no frame pairs {gap} apart in the training data")));
    }
    let mean = match mean_spec {
        MeanSpec::Auto => mean_acc,
        MeanSpec::Fixed(m) => m,
    };
    s.note("resolved_mean", MeanSpec::Fixed(mean));
    log::info!("training on {} pairs for {} iterations", pairs.len(), cfg.iterations);
    let out = train::<f64>(&pairs, intrinsics.as_ref().expect("at least one dataset"), mean, &cfg)?;

    ensure_dir(&a.out)?;
    out.params.save(&a.out.join("params.bin"))?;
    write_file(&a.out.join("loss.csv"), |w| write_loss_history(&out.history, w))?;
    if let Some(last) = out.history.iter().rev().find(|r| r.tap == "total") {
        log::info!("final loss {:.6e}", last.loss);
    }
    s.save(&a.out)
}

fn eval(a: &EvalArgs, s: &mut Settings) -> Result<()> {
    s.note("pred", a.pred.display());
    s.note("gt", a.gt.display());
    let scale = s.pick("pred_scale", a.pred_scale, DEFAULT_DEPTH_SCALE)?;
    let log_metric: LogMetric = s.pick("log_metric", parsed(&a.log_metric)?, LogMetric::Rms)?;
    let (seq, _) = load_tum_sequence(&a.gt)?;
    let mut rows = Vec::new();
    for frame in &seq.frames {
        let t = stamp(frame.timestamp);
        let path = a.pred.join(format!("{t}.png"));
        if !path.exists() {
            continue;
        }
        let pred = DepthMap::<f64>::load_png16(&path, scale)?;
        let factor = (0..7)
            .map(|e| 1usize << e)
            .find(|&f| frame.depth.width.div_ceil(f) == pred.width && frame.depth.height.div_ceil(f) == pred.height)
            .ok_or_else(|| Error::Dimension(format!("{}: size does not divide the ground truth", path.display())))?;
        rows.push((t, evaluate_with(&pred, &frame.depth.downsample_nearest(factor), log_metric)?));
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("no predictions in {} match frames of {}", a.pred.display(), a.gt.display())));
    }
    let mean = DepthMetrics::mean(&rows.iter().map(|(_, m)| *m).collect::<Vec<_>>()).expect("non-empty");
    let mut table = rows.clone();
    table.push(("mean".into(), mean));
    let mut stdout = std::io::stdout().lock();
    write_table(&table, &mut stdout).map_err(|e| io_error(Path::new("<stdout>"), e))?;
    if let Some(out) = &a.out {
        ensure_dir(out)?;
        write_file(&out.join("metrics.csv"), |w| {
            writeln!(w, "frame,{CSV_HEADER},pixels")?;
            for (t, m) in &table {
                writeln!(w, "{t},{},{}", m.csv_row(), m.pixels)?;
            }
            Ok(())
        })?;
        s.save(out)?;
    }
    Ok(())
}

fn parse_pixels(spec: &str) -> Result<Vec<(usize, usize)>> {
    spec.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| match parse_list::<usize>(p, ',', "pixel coordinate")?[..] {
            [x, y] => Ok((x, y)),
            _ => Err(Error::Domain(format!("pixel must be x,y, got {p:?}"))),
        })
        .collect()
}

fn costcurve(a: &CostcurveArgs, s: &mut Settings) -> Result<()> {
    let m = matching(&a.matching, s)?;
    let index = m.keyframe_index(s.pick_opt("keyframe", a.keyframe)?)?;
    let pixels = parse_pixels(&s.pick("pixels", Some(a.pixels.clone()), String::new())?)?;
    if pixels.is_empty() {
        return Err(Error::Domain("no pixels given".into()));
    }
    let (w, h) = (m.seq.intrinsics.width, m.seq.intrinsics.height);
    if let Some(&(x, y)) = pixels.iter().find(|&&(x, y)| x >= w || y >= h) {
        return Err(Error::Domain(format!("pixel ({x}, {y}) outside the {w}x{h} image")));
    }
    let rgb = m.keyframe(&Provider::Rgb(m.mean), index)?;
    let learned = m.keyframe(&m.provider, index)?;
    ensure_dir(&a.out)?;
    for &(x, y) in &pixels {
        let f = learned.factor as usize;
        let c_rgb = rgb.cv.cost_curve(x, y)?;
        let c_feat = learned.cv.cost_curve(x / f, y / f)?;
        write_file(&a.out.join(format!("costcurve_x{x}_y{y}.csv")), |wr| {
            writeln!(wr, "rho,rgb,features")?;
            for (l, (r, g)) in c_rgb.iter().zip(c_feat).enumerate() {
                writeln!(wr, "{},{r},{g}", m.grid.rho(l))?;
            }
            Ok(())
        })?;
    }
    s.note("provider", m.provider.name());
    s.save(&a.out)
}

fn sweep(a: &SweepArgs, s: &mut Settings) -> Result<()> {
    let m = matching(&a.matching, s)?;
    let (_, base) = regularizer_config(&a.regularize, s)?;
    let index = m.keyframe_index(s.pick_opt("keyframe", a.keyframe)?)?;
    let lambdas = parse_list::<f64>(&s.pick("lambdas", Some(a.lambdas.clone()), String::new())?, ',', "lambda")?;
    if let Some(bad) = lambdas.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
        return Err(Error::Domain(format!("sweep lambdas must be positive, got {bad}")));
    }
    let log_metric: LogMetric = s.pick("log_metric", parsed(&a.log_metric)?, LogMetric::Rms)?;
    let kf = m.keyframe(&m.provider, index)?;
    let rows = lambda_sweep(&kf.cv, &m.grid, &base, &lambdas, &kf.gt_depth, log_metric)?;
    ensure_dir(&a.out)?;
    write_file(&a.out.join("sweep.csv"), |w| write_sweep_csv(&rows, w))?;
    let table: Vec<(String, DepthMetrics)> = rows.iter().map(|r| (format!("lambda={}", r.lambda), r.metrics)).collect();
    let mut stdout = std::io::stdout().lock();
    write_table(&table, &mut stdout).map_err(|e| io_error(Path::new("<stdout>"), e))?;
    s.note("provider", m.provider.name());
    s.save(&a.out)
}
