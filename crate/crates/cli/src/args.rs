use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use spodnet::Variant;

#[derive(Debug, Parser)]
#[command(
    name = "spodnet",
    version,
    about = "Learn sparse precision matrices with SPD-preserving layers"
)]
#[command(args_override_self = true)]
pub struct Cli {
    /// JSON file of flag values; flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_parser = at_least::<1>)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of (precision, covariance) pairs.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint and per-epoch metrics.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Score a classical estimator on a dataset.
    Baseline(BaselineArgs),
    /// Trace spectra after every column update and audit each perturbation.
    Diagnose(DiagnoseArgs),
}

fn at_least<const MIN: usize>(s: &str) -> Result<usize, String> {
    let x: usize = s.parse().map_err(|e| format!("{e}"))?;
    if x >= MIN {
        Ok(x)
    } else {
        Err(format!("{x} is below the minimum of {MIN}"))
    }
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let x: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&x) {
        Ok(x)
    } else {
        Err(format!("{x} is outside [0, 1]"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let x: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{x} must be a positive number"))
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    let x: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if x >= 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{x} must be a non-negative number"))
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Matrix dimension.
    #[arg(long, value_parser = at_least::<2>)]
    pub p: usize,
    /// Samples drawn per covariance estimate.
    #[arg(long, value_parser = at_least::<1>)]
    pub n: usize,
    /// Number of dataset entries.
    #[arg(long, value_parser = at_least::<1>)]
    pub num: usize,
    /// Probability that an off-diagonal entry is zero.
    #[arg(long, value_parser = unit_interval)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Also store the raw sample blocks (needed by glasso-cv, lw and oas).
    #[arg(long)]
    pub keep_samples: bool,
    /// Diagonal shift added after the spectrum is made positive.
    #[arg(long, default_value_t = 0.1, value_parser = non_negative)]
    pub diag_boost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Ubg,
    Pnp,
    E2e,
}

impl From<ModelArg> for Variant {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Ubg => Variant::Ubg,
            ModelArg::Pnp => Variant::Pnp,
            ModelArg::E2e => Variant::E2e,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GradModeArg {
    /// Inverse-derived quantities are constants on the tape.
    Detached,
    /// Differentiate through the maintained inverse as well.
    Full,
}

#[derive(Debug, Args)]
pub struct LayerArgs {
    /// Target of the preactivation rescaling.
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    pub zeta: f64,
    /// Turn the preactivation rescaling off.
    #[arg(long)]
    pub no_stabilizer: bool,
    /// Number of stacked layers.
    #[arg(long, default_value_t = 1, value_parser = at_least::<1>)]
    pub layers: usize,
    #[arg(long, value_enum, default_value_t = GradModeArg::Detached)]
    pub grad_mode: GradModeArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub model: ModelArg,
    /// Training dataset directory.
    #[arg(long)]
    pub train: PathBuf,
    /// Test dataset directory, scored after every epoch.
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-2, value_parser = non_negative)]
    pub lr: f64,
    #[arg(long, default_value_t = 10, value_parser = at_least::<1>)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub layer: LayerArgs,
    /// Output directory for `checkpoint.json` and `metrics.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output JSON file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Glasso,
    GlassoCv,
    Lw,
    Oas,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long, value_enum)]
    pub method: MethodArg,
    #[arg(long)]
    pub data: PathBuf,
    /// Output JSON file.
    #[arg(long)]
    pub out: PathBuf,
    /// Penalty for `glasso`.
    #[arg(long, default_value_t = 0.1, value_parser = non_negative)]
    pub lambda: f64,
    /// Folds for `glasso-cv`.
    #[arg(long, default_value_t = 5, value_parser = at_least::<2>)]
    pub folds: usize,
    /// Comma-separated penalty grid for `glasso-cv` (default: log grid from the data).
    #[arg(long, value_delimiter = ',', value_parser = non_negative)]
    pub grid: Option<Vec<f64>>,
    /// Stop when a sweep lowers the objective by less than this.
    #[arg(long, default_value_t = 1e-8, value_parser = positive)]
    pub tol: f64,
    #[arg(long, default_value_t = 2000, value_parser = at_least::<1>)]
    pub max_sweeps: usize,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for `trace.csv` and `audit.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the checkpoint's rescaling target.
    #[arg(long, value_parser = positive)]
    pub zeta: Option<f64>,
    /// Run without the preactivation rescaling.
    #[arg(long)]
    pub no_stabilizer: bool,
    /// Only trace the first this many entries.
    #[arg(long, value_parser = at_least::<1>)]
    pub limit: Option<usize>,
}
