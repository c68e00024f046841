use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sdda::losses::Bandwidth;
use sdda::models::Arch;

#[derive(Debug, Parser)]
#[command(name = "sdda", version, about = "Siamese deep domain adaptation for cross-session trial classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic source/target session pair.
    Synth(SynthArgs),
    /// Filter, standardize, normalize and align one domain.
    Preprocess(PreprocessArgs),
    /// Train a model with the two-stage Siamese protocol.
    Train(TrainArgs),
    /// Sweep the (lambda1, lambda2) trade-off grid.
    Gridsearch(GridArgs),
    /// Score a checkpoint on a labeled trial container.
    Eval(EvalArgs),
    /// Write per-trial embeddings with labels and domain tags.
    ExportEmbeddings(ExportArgs),
    /// Build a methods-by-participants table from eval outputs.
    Report(ReportArgs),
    /// Re-run a command from its manifest and verify identical results.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config with optional [synth], [preproc] and [train] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; receives the results and manifest.toml.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub shift: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub trials_per_class: Option<usize>,
}

#[derive(Debug, Args, Default, Clone)]
pub struct PreprocFlags {
    /// Use the input trials as they are.
    #[arg(long)]
    pub no_preprocess: bool,
    #[arg(long)]
    pub no_filter: bool,
    #[arg(long)]
    pub no_ema: bool,
    /// Skip both per-channel normalization and alignment.
    #[arg(long)]
    pub no_invariants: bool,
    #[arg(long)]
    pub no_normalize: bool,
    #[arg(long)]
    pub no_align: bool,
    #[arg(long)]
    pub filter_order: Option<usize>,
    #[arg(long)]
    pub low_hz: Option<f64>,
    #[arg(long)]
    pub high_hz: Option<f64>,
    #[arg(long)]
    pub ema_decay: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub common: Common,
    /// Trial container (.trl) or a directory of per-trial CSV files.
    #[arg(long)]
    pub input: PathBuf,
    /// Sampling rate for CSV input.
    #[arg(long)]
    pub fs: Option<f64>,
    #[command(flatten)]
    pub preproc: PreprocFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    NoMmd,
    NoCenter,
    NoInvariants,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Eegnet,
    Convnet,
}

impl From<ModelArg> for Arch {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Eegnet => Arch::EegNet,
            ModelArg::Convnet => Arch::ConvNet,
        }
    }
}

fn parse_bandwidth(s: &str) -> Result<Bandwidth, String> {
    if s == "median" {
        return Ok(Bandwidth::MedianFamily);
    }
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 => Ok(Bandwidth::Fixed(v)),
        _ => Err(format!("bandwidth is 'median' or a positive sigma^2, got '{s}'")),
    }
}

#[derive(Debug, Args, Default, Clone)]
pub struct TrainFlags {
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub center_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub max_epochs_stage1: Option<usize>,
    #[arg(long)]
    pub max_epochs_stage2: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    /// `median` for the five-kernel median family, or a fixed sigma^2.
    #[arg(long, value_parser = parse_bandwidth)]
    pub bandwidth: Option<Bandwidth>,
    /// Remove one SDDA component; repeatable.
    #[arg(long, value_enum)]
    pub ablate: Vec<Ablation>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Labeled source-session container.
    #[arg(long)]
    pub source: PathBuf,
    /// Target-session container. Its labels, if any, are never used for
    /// training; they only feed the reported target accuracy.
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "eegnet")]
    pub model: ModelArg,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub preproc: PreprocFlags,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub source: PathBuf,
    /// Labeled target container; trained on unlabeled, scored with labels.
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, value_enum, default_value = "eegnet")]
    pub model: ModelArg,
    /// Comma-separated λ1 values; defaults to the paper grid.
    #[arg(long, value_delimiter = ',')]
    pub lambda1_grid: Option<Vec<f64>>,
    /// Comma-separated λ2 values; defaults to the paper grid.
    #[arg(long, value_delimiter = ',')]
    pub lambda2_grid: Option<Vec<f64>>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub preproc: PreprocFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Row label in report tables.
    #[arg(long, default_value = "SDDA")]
    pub method: String,
    /// Column label in report tables; defaults to the container's
    /// participant tag or file stem.
    #[arg(long)]
    pub participant: Option<String>,
    #[command(flatten)]
    pub preproc: PreprocFlags,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[command(flatten)]
    pub preproc: PreprocFlags,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    /// metrics.csv files written by `sdda eval`.
    #[arg(required = true)]
    pub metrics: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Where the re-run writes; must differ from the original output.
    #[arg(long)]
    pub out: PathBuf,
}
