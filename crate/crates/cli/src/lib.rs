//! Command-line front end: synthetic data, reconstruction, training,
//! evaluation, cost-curve export and λ sweeps.

mod commands;
mod provider;
mod settings;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use provider::{FeatureSource, MeanSpec};

/// Exit status for successful runs.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] densematch::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use densematch::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::Domain(_)) => EXIT_USAGE,
            CliError::Core(E::Numerical(_)) => EXIT_NUMERICAL,
            CliError::Core(_) => EXIT_DATA,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "densematch", version, about = "Dense multi-view depth from learned or color matching features")]
pub struct Cli {
    /// Worker threads; 0 uses all cores. Outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Seed for all randomness.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// key = value file with defaults for any option; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic RGB-D sequence in the TUM layout.
    Synth(SynthArgs),
    /// Plane-sweep depth for keyframes, with optional regularization.
    Reconstruct(ReconstructArgs),
    /// Train a feature extractor on one or more datasets.
    Train(TrainArgs),
    /// Score predicted depth maps against a dataset's depth.
    Eval(EvalArgs),
    /// Export per-bin matching cost for chosen pixels.
    Costcurve(CostcurveArgs),
    /// Regularized depth error as a function of λ.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// textured-plane, repeated-texture or stepped-boxes
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub focal: Option<f64>,
    /// Camera translation along x between frames, meters.
    #[arg(long)]
    pub baseline: Option<f64>,
    /// Camera yaw between frames, radians.
    #[arg(long)]
    pub yaw_step: Option<f64>,
    #[arg(long)]
    pub depth: Option<f64>,
    #[arg(long)]
    pub slant: Option<f64>,
    /// Stripe period in pixels at the plane depth.
    #[arg(long)]
    pub period: Option<f64>,
    #[arg(long)]
    pub stripe_amplitude: Option<f64>,
    /// Amplitude of the faint pattern on striped planes.
    #[arg(long)]
    pub context: Option<f64>,
    /// Gaussian sensor noise, intensity units.
    #[arg(long)]
    pub noise: Option<f64>,
}

/// Options shared by commands that build cost volumes.
#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// rgb, file:<dir> or trained:<params>
    #[arg(long)]
    pub features: Option<String>,
    /// Color mean for rgb features: auto or R,G,B
    #[arg(long)]
    pub mean: Option<String>,
    #[arg(long)]
    pub grid_bins: Option<usize>,
    #[arg(long)]
    pub rho_min: Option<f64>,
    #[arg(long)]
    pub rho_max: Option<f64>,
    /// l1 or l2sq
    #[arg(long)]
    pub norm: Option<String>,
    /// Live frames on each side of a keyframe.
    #[arg(long)]
    pub window: Option<usize>,
    /// Frame step inside the window.
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RegularizeArgs {
    /// Data-term divisor; 0 skips regularization.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Multiplier on matching costs before regularization.
    #[arg(long)]
    pub cost_scale: Option<f64>,
    #[arg(long)]
    pub huber_eps: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub matching: MatchArgs,
    #[command(flatten)]
    pub regularize: RegularizeArgs,
    /// mid, all, or comma-separated frame indices
    #[arg(long)]
    pub keyframes: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Comma-separated dataset directories.
    #[arg(long)]
    pub dataset: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Frame gap between the two images of a pair.
    #[arg(long)]
    pub gap: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub first_stride: Option<usize>,
    #[arg(long)]
    pub grid_bins: Option<usize>,
    #[arg(long)]
    pub rho_min: Option<f64>,
    #[arg(long)]
    pub rho_max: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub batch_pairs: Option<usize>,
    #[arg(long)]
    pub lambda_rho: Option<f64>,
    #[arg(long)]
    pub lambda_d: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub norm: Option<String>,
    /// Comma-separated weight per tap (blocks, then the aggregate).
    #[arg(long)]
    pub tap_weights: Option<String>,
    /// Network input color mean: auto or R,G,B
    #[arg(long)]
    pub mean: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted 16-bit depth PNGs named by timestamp.
    #[arg(long)]
    pub pred: PathBuf,
    /// Dataset providing ground-truth depth.
    #[arg(long)]
    pub gt: PathBuf,
    /// Units per meter in the predicted PNGs.
    #[arg(long)]
    pub pred_scale: Option<f64>,
    /// rms or mean-abs
    #[arg(long)]
    pub log_metric: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CostcurveArgs {
    #[command(flatten)]
    pub matching: MatchArgs,
    /// Reference frame index; defaults to the middle frame.
    #[arg(long)]
    pub keyframe: Option<usize>,
    /// Image pixels as x,y;x,y;...
    #[arg(long)]
    pub pixels: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub matching: MatchArgs,
    #[command(flatten)]
    pub regularize: RegularizeArgs,
    #[arg(long)]
    pub keyframe: Option<usize>,
    /// Comma-separated λ values.
    #[arg(long)]
    pub lambdas: String,
    /// rms or mean-abs
    #[arg(long)]
    pub log_metric: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Runs a parsed command inside a thread pool of the requested size.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot build thread pool: {e}")))?;
    pool.install(|| commands::dispatch(&cli))
}

/// Parses arguments, runs, reports errors on stderr and returns the exit
/// code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
