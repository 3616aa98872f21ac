use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::extractor::{ExtractorConfig, ExtractorParams};
use super::loss::{deep_supervised_loss, LossWeights, PairSupervision};
use crate::config::KeyValues;
use crate::costvolume::MatchNorm;
use crate::dataio::TrainingPair;
use crate::geometry::{CameraIntrinsics, InverseDepthGrid};
use crate::{Error, Real, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub extractor: ExtractorConfig,
    pub grid_bins: usize,
    pub rho_min: f64,
    pub rho_max: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Pairs averaged per step.
    pub batch_pairs: usize,
    pub seed: u64,
    pub loss: LossWeights,
    pub norm: MatchNorm,
    /// One weight per tap (blocks, then the aggregate); all ones if `None`.
    pub tap_weights: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            extractor: ExtractorConfig::default(),
            grid_bins: 256,
            rho_min: 0.0,
            rho_max: 4.0,
            iterations: 1000,
            learning_rate: 1e-5,
            momentum: 0.9,
            clip_norm: 10.0,
            batch_pairs: 1,
            seed: 0,
            loss: LossWeights::default(),
            norm: MatchNorm::SquaredL2,
            tap_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn grid<T: Real>(&self) -> Result<InverseDepthGrid<T>> {
        InverseDepthGrid::new(self.grid_bins, T::of(self.rho_min), T::of(self.rho_max))
    }

    pub fn resolved_tap_weights(&self) -> Result<Vec<f64>> {
        let n = self.extractor.tap_count();
        match &self.tap_weights {
            None => Ok(vec![1.0; n]),
            Some(w) if w.len() == n => Ok(w.clone()),
            Some(w) => Err(Error::Domain(format!("{} tap weights for {n} taps", w.len()))),
        }
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("blocks", self.extractor.blocks)
            .set("channels", self.extractor.channels)
            .set("first_stride", self.extractor.first_stride)
            .set("grid_bins", self.grid_bins)
            .set("rho_min", self.rho_min)
            .set("rho_max", self.rho_max)
            .set("iterations", self.iterations)
            .set("learning_rate", self.learning_rate)
            .set("momentum", self.momentum)
            .set("clip_norm", self.clip_norm)
            .set("batch_pairs", self.batch_pairs)
            .set("seed", self.seed)
            .set("lambda_rho", self.loss.lambda_rho)
            .set("lambda_d", self.loss.lambda_d)
            .set("margin", self.loss.margin)
            .set("norm", self.norm.name());
        if let Some(w) = &self.tap_weights {
            kv.set("tap_weights", w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        }
        kv
    }

    /// Missing keys keep their defaults.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let tap_weights = match kv.raw("tap_weights") {
            None => None,
            Some(s) => Some(
                s.split(',')
                    .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Domain(format!("bad tap weight '{v}'"))))
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        let cfg = Self {
            extractor: ExtractorConfig {
                blocks: kv.get_or("blocks", d.extractor.blocks)?,
                channels: kv.get_or("channels", d.extractor.channels)?,
                first_stride: kv.get_or("first_stride", d.extractor.first_stride)?,
            },
            grid_bins: kv.get_or("grid_bins", d.grid_bins)?,
            rho_min: kv.get_or("rho_min", d.rho_min)?,
            rho_max: kv.get_or("rho_max", d.rho_max)?,
            iterations: kv.get_or("iterations", d.iterations)?,
            learning_rate: kv.get_or("learning_rate", d.learning_rate)?,
            momentum: kv.get_or("momentum", d.momentum)?,
            clip_norm: kv.get_or("clip_norm", d.clip_norm)?,
            batch_pairs: kv.get_or("batch_pairs", d.batch_pairs)?,
            seed: kv.get_or("seed", d.seed)?,
            loss: LossWeights {
                lambda_rho: kv.get_or("lambda_rho", d.loss.lambda_rho)?,
                lambda_d: kv.get_or("lambda_d", d.loss.lambda_d)?,
                margin: kv.get_or("margin", d.loss.margin)?,
            },
            norm: kv.get_or("norm", d.norm)?,
            tap_weights,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.extractor.validate()?;
        self.grid::<f64>()?;
        self.resolved_tap_weights()?;
        if self.batch_pairs == 0 {
            return Err(Error::Domain("batch_pairs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.clip_norm > 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::Domain("learning rate and clip norm must be positive, momentum in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub tap: String,
    pub loss: f64,
}

pub fn write_loss_history<W: Write>(records: &[LossRecord], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "iter,tap,loss")?;
    for r in records {
        writeln!(out, "{},{},{}", r.iter, r.tap, r.loss)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: ExtractorParams<T>,
    /// Per iteration: one row per tap and a `total` row, averaged over the
    /// batch.
    pub history: Vec<LossRecord>,
}

/// Loss and parameter gradient of one pair under the current parameters.
pub fn pair_gradient<T: Real>(
    params: &ExtractorParams<T>,
    pair: &TrainingPair,
    intrinsics: &CameraIntrinsics<f64>,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>, ExtractorParams<T>)> {
    let grid = cfg.grid::<T>()?;
    let tap_weights = cfg.resolved_tap_weights()?;
    let (f_ref, c_ref) = params.forward(&params.input_features(&pair.reference))?;
    let (f_live, c_live) = params.forward(&params.input_features(&pair.live))?;
    let gt = pair.gt_inverse_depth.cast::<T>();
    let sup = PairSupervision { relative_pose: pair.relative_pose.cast(), intrinsics: intrinsics.cast(), gt_inverse_depth: &gt };
    let loss = deep_supervised_loss(&f_ref, &f_live, &sup, &grid, &cfg.loss, &tap_weights, cfg.norm)?;
    let mut grad = params.backward(&c_ref, &loss.grad_ref)?;
    let g_live = params.backward(&c_live, &loss.grad_live)?;
    let summed: Vec<T> = grad.flatten().iter().zip(g_live.flatten()).map(|(&a, b)| a + b).collect();
    grad.set_flat(&summed)?;
    Ok((loss.total, loss.taps.iter().map(|t| t.loss).collect(), grad))
}

/// Trains an extractor from Xavier initialization by SGD with momentum and
/// global gradient-norm clipping. Pairs are visited in a seeded shuffled
/// order, so a run is reproducible bit for bit.
pub fn train<T: Real>(
    pairs: &[TrainingPair],
    intrinsics: &CameraIntrinsics<f64>,
    input_mean: [f64; 3],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data("no training pairs".into()));
    }
    let mut params = ExtractorParams::<T>::xavier(cfg.extractor, input_mean, cfg.seed)?;
    let names = cfg.extractor.tap_names();
    let mut velocity = vec![0.0f64; params.num_params()];
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut cursor = order.len();
    let mut history = Vec::with_capacity(cfg.iterations * (names.len() + 1));

    for iter in 0..cfg.iterations {
        let mut grad = vec![0.0f64; params.num_params()];
        let mut taps = vec![0.0f64; names.len()];
        let mut total = 0.0;
        for _ in 0..cfg.batch_pairs {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let pair = &pairs[order[cursor]];
            cursor += 1;
            let (loss, tap_losses, g) = pair_gradient(&params, pair, intrinsics, cfg)?;
            total += loss;
            for (a, b) in taps.iter_mut().zip(tap_losses) {
                *a += b;
            }
            for (a, b) in grad.iter_mut().zip(g.flatten()) {
                *a += b.f64();
            }
        }
        let inv = 1.0 / cfg.batch_pairs as f64;
        total *= inv;
        grad.iter_mut().for_each(|g| *g *= inv);
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !total.is_finite() || !norm.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss or gradient at iteration {iter}")));
        }
        for (name, loss) in names.iter().zip(&taps) {
            history.push(LossRecord { iter, tap: name.clone(), loss: loss * inv });
        }
        history.push(LossRecord { iter, tap: "total".into(), loss: total });
        if iter % 50 == 0 || iter + 1 == cfg.iterations {
            log::info!("iter {iter}: loss {total:.6} grad norm {norm:.4}");
        }

        let clip = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
        let mut flat: Vec<f64> = params.flatten().iter().map(|v| v.f64()).collect();
        for ((p, v), g) in flat.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
            *v = cfg.momentum * *v + clip * g;
            *p -= cfg.learning_rate * *v;
        }
        params.set_flat(&flat.iter().map(|&v| T::of(v)).collect::<Vec<_>>())?;
    }
    Ok(TrainOutcome { params, history })
}
