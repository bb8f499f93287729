mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use volcls_core::models::Architecture;
use volcls_core::ErrorKind;

/// 3D CNN classifiers for multi-sequence prostate MRI volumes, with a
/// synthetic phantom pipeline for end-to-end runs.
#[derive(Parser, Debug)]
#[command(name = "volcls", version)]
struct Cli {
    /// Root for default output locations.
    #[arg(long, env = "VOLCLS_OUT", default_value = "runs", global = true)]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled phantom dataset and its manifest.
    Synth(SynthArgs),
    /// Train a classifier on a manifest.
    Train(TrainArgs),
    /// Score checkpoints or segmentation maps and report AUC ROC / AP.
    Evaluate(EvaluateArgs),
    /// Write per-study scores of one checkpoint as CSV.
    Predict(PredictArgs),
    /// Per-stage parameter counts against the published totals.
    CountParams(CountParamsArgs),
    /// Search stage widths that reproduce a parameter total.
    SearchWidths(SearchWidthsArgs),
    /// Write one study before and after augmentation.
    AugmentPreview(AugmentPreviewArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 0.3)]
    pub malignant_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Volume size D,H,W.
    #[arg(long, value_delimiter = ',', num_args = 1, default_value = "16,64,64")]
    pub geometry: Vec<usize>,
    /// Background and gland noise standard deviation.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Output directory [default: <out-root>/data].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run config JSON; flags given here override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub arch: Option<Architecture>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Data-pipeline workers (loading is sequential; only 1 is accepted).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Fixed D,H,W window centred on the prostate mask.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    pub crop: Option<Vec<usize>>,
    /// Train without augmentation.
    #[arg(long)]
    pub no_augment: bool,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Run directory [default: <out-root>/<arch>-seed<seed>].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Where studies come from: a run directory, a run config, or a manifest.
#[derive(Args, Debug)]
pub struct DataArgs {
    /// Training run directory; supplies run_config.json, split.json and
    /// best.ckpt unless given explicitly.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Run config supplying the manifest and preprocessing.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Split JSON written by `train`.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// train, val, test or all. Without a split only `all` is available.
    #[arg(long)]
    pub partition: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint to score; repeat for a comparison table.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    /// Directory of `<study_id>.raw` probability maps, max-pooled into a
    /// baseline row.
    #[arg(long)]
    pub maps: Option<PathBuf>,
    #[arg(long, default_value_t = volcls_core::eval::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Report directory [default: <out-root>/eval].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// CSV path [default: <out-root>/predictions.csv].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CountParamsArgs {
    #[arg(long)]
    pub arch: Option<Architecture>,
    /// Model config JSON, or a run config with a `model` section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// List every layer instead of stage totals.
    #[arg(long)]
    pub layers: bool,
}

#[derive(Args, Debug)]
pub struct SearchWidthsArgs {
    #[arg(long)]
    pub arch: Architecture,
    /// Parameter total to hit [default: the published total].
    #[arg(long)]
    pub target: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    /// Also write the full report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AugmentPreviewArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub study: String,
    /// Augmentation spec JSON [default: the training default].
    #[arg(long)]
    pub augmentation: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Draw index, the epoch during training.
    #[arg(long, default_value_t = 0)]
    pub epoch: u64,
    /// Output directory [default: <out-root>/preview/<study>].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let root = cli.out_root;
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&root, a),
        Command::Train(a) => commands::train(&root, a),
        Command::Evaluate(a) => commands::evaluate(&root, a),
        Command::Predict(a) => commands::predict(&root, a),
        Command::CountParams(a) => commands::count_params(a),
        Command::SearchWidths(a) => commands::search_widths(a),
        Command::AugmentPreview(a) => commands::augment_preview(&root, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
