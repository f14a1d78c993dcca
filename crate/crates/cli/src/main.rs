mod commands;
mod error;
mod provenance;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

/// Gaze-guided semi-supervised segmentation on a synthetic world.
#[derive(Debug, Parser)]
#[command(name = "gazeseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset tree (images, labels, gaze traces).
    Gen(GenArgs),
    /// Classify a gaze trace and keep its fixations.
    FilterGaze(FilterArgs),
    /// Render fixations into a max-normalised heatmap.
    Heatmap(HeatmapArgs),
    /// Paste one sample's gaze region into another's.
    Mix(MixArgs),
    /// Pre-train the teacher on the labeled split.
    Pretrain(TrainArgs),
    /// Pre-train the teacher (unless given) and run the semi-supervised loop.
    Train(TrainArgs),
    /// Score a checkpoint against ground truth.
    Eval(EvalArgs),
    /// Train the six component configurations and the gaze-weight sweep.
    Ablation(AblationArgs),
    /// Render a training log or a gaze-weight sweep to SVG.
    Plot(PlotArgs),
}

/// Overrides applied on top of the config file. The seed can also come from
/// the GAZESEG_SEED environment variable; this flag wins over both.
#[derive(Debug, Args)]
struct WorldOverrides {
    /// JSON run config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for data generation and training [config default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Training samples to generate [config default: 200].
    #[arg(long)]
    samples: Option<usize>,
    /// Labeled fraction of the training samples [config default: 0.1].
    #[arg(long)]
    ratio: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainOverrides {
    /// Semi-supervised iterations [config default: 2000].
    #[arg(long)]
    iterations: Option<usize>,
    /// Teacher pre-training iterations [config default: 500].
    #[arg(long)]
    pretrain_iterations: Option<usize>,
    /// Samples per batch [config default: 8].
    #[arg(long)]
    batch_size: Option<usize>,
    /// SGD step size [config default: 0.01].
    #[arg(long)]
    lr: Option<f64>,
    /// Gaze loss weight [config default: 0.5].
    #[arg(long)]
    lambda: Option<f64>,
    /// Teacher EMA decay [config default: 0.99].
    #[arg(long)]
    ema_decay: Option<f64>,
    /// Validate every N iterations, 0 for the last one only [config default: 200].
    #[arg(long)]
    val_every: Option<usize>,
    /// Checkpoint every N iterations, 0 for the last one only [config default: 0].
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Disable gaze-guided mixing (flips only).
    #[arg(long)]
    no_gazemix: bool,
    /// Disable the gaze perception head.
    #[arg(long)]
    no_mgp: bool,
    /// Disable the gaze alignment loss.
    #[arg(long)]
    no_gaze_loss: bool,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[command(flatten)]
    world: WorldOverrides,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FilterArgs {
    /// Gaze CSV with `t_ms,x,y` rows.
    #[arg(long)]
    input: PathBuf,
    /// Output CSV holding the fixations only.
    #[arg(long)]
    output: PathBuf,
    /// Fixation velocity threshold in px/s.
    #[arg(long, default_value_t = 300.0)]
    v_th: f64,
    /// Image width in pixels.
    #[arg(long)]
    width: usize,
    /// Image height in pixels.
    #[arg(long)]
    height: usize,
}

#[derive(Debug, Args)]
struct HeatmapArgs {
    /// Fixation CSV with `t_ms,x,y` rows.
    #[arg(long)]
    input: PathBuf,
    /// Output stem; writes `<stem>.f32` and `<stem>.json`.
    #[arg(long)]
    output: PathBuf,
    /// Gaussian width in pixels [default: 5% of the width].
    #[arg(long)]
    sigma: Option<f64>,
    /// Image width in pixels.
    #[arg(long)]
    width: usize,
    /// Image height in pixels.
    #[arg(long)]
    height: usize,
}

#[derive(Debug, Args)]
struct MixArgs {
    /// Dataset directory holding both samples.
    #[arg(long)]
    data: PathBuf,
    /// Foreground sample id (the crop source).
    #[arg(long)]
    fg: String,
    /// Background sample id (the paste target).
    #[arg(long)]
    bg: String,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON run config for the gaze and mix sections.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    world: WorldOverrides,
    #[command(flatten)]
    train: TrainOverrides,
    /// Existing dataset directory instead of generating one.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Start from this pre-trained teacher checkpoint (train only).
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Validation,
    Unlabeled,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    world: WorldOverrides,
    /// Existing dataset directory instead of generating one.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Split to score [config default: validation].
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    /// Output directory for `per_sample.csv` and `macro.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AblationArgs {
    #[command(flatten)]
    world: WorldOverrides,
    #[command(flatten)]
    train: TrainOverrides,
    /// Comma-separated seeds, one world and one training run each.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Comma-separated gaze weights for the sweep.
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.5,1")]
    lambdas: Vec<f64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PlotArgs {
    /// `train_log.jsonl` (loss curves) or `lambda_sweep.csv` (metric vs lambda).
    #[arg(long)]
    input: PathBuf,
    /// Output SVG file.
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::FilterGaze(a) => commands::filter_gaze(a),
        Command::Heatmap(a) => commands::heatmap(a),
        Command::Mix(a) => commands::mix(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablation(a) => commands::ablation(a),
        Command::Plot(a) => commands::plot(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gazeseg: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
