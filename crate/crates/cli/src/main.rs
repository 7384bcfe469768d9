//! `sardiff`: prepare data, train, sample and evaluate diffusion models.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod config;
mod export;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};

use sardiff::data::DEFAULT_LOG_EPSILON;
use sardiff::schedule::ScheduleKind;

use config::{parse_kind, TrainFlags};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config, missing or inconsistent inputs.
    Usage(String),
    Runtime(String),
    Core(sardiff::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use sardiff::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(E::InvalidArgument(_) | E::ConfigConflict(_) | E::InvalidClass { .. }) => 2,
            CliError::Runtime(_) | CliError::Core(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl From<sardiff::Error> for CliError {
    fn from(e: sardiff::Error) -> Self {
        CliError::Core(e)
    }
}

#[derive(Parser, Debug)]
#[command(name = "sardiff", version, about = "Class-conditional diffusion models for radar imagery")]
struct Cli {
    /// Log level: error, warn, info, debug or trace (RUST_LOG also works).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a normalized dataset from synthetic targets, scenes or an image folder.
    Prepare(PrepareArgs),
    /// Train a (class-conditional) model from scratch.
    Train(TrainArgs),
    /// Unconditional pretraining on clutter; with --targets, also fine-tune.
    Pretrain(PretrainArgs),
    /// Attach a class table to a pretrained model and fine-tune it.
    Finetune(FinetuneArgs),
    /// Generate images from a checkpoint.
    Sample(SampleArgs),
    /// Score generated images against a real dataset (IS, FID, KID).
    Evaluate(EvaluateArgs),
    /// Train the classifier used as feature extractor by `evaluate`.
    TrainExtractor(ExtractorArgs),
    /// Write the alpha-bar curve of a noise schedule as CSV.
    ScheduleDump(ScheduleDumpArgs),
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("source").required(true).args(["synthetic", "scenes", "folder"])))]
pub struct PrepareArgs {
    /// Output root; datasets go to `<out>/train` and `<out>/test`.
    #[arg(long)]
    pub out: PathBuf,
    /// Generate speckled synthetic targets.
    #[arg(long)]
    pub synthetic: bool,
    /// Directory of large scenes to cut into unlabeled tiles.
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    /// Directory laid out as `<class>/<images>` (optionally under train/ and test/).
    #[arg(long)]
    pub folder: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    /// Held-out synthetic images per class (0: no test split).
    #[arg(long, default_value_t = 0)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 128)]
    pub tile: usize,
    /// Input is already logarithmic; skip the dB conversion.
    #[arg(long)]
    pub no_log: bool,
    #[arg(long, default_value_t = DEFAULT_LOG_EPSILON)]
    pub log_epsilon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub clutter: Option<PathBuf>,
    /// Labeled targets; runs the fine-tuning phase too.
    #[arg(long)]
    pub targets: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples, spread round-robin over the chosen classes.
    #[arg(short = 'n', long = "num", default_value_t = 16, conflicts_with = "per_class")]
    pub num: usize,
    /// Samples per chosen class, instead of -n.
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Class ids to generate (comma-separated); default all.
    #[arg(long, value_delimiter = ',')]
    pub class: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Use beta_t instead of the posterior variance in the reverse step.
    #[arg(long)]
    pub beta_variance: bool,
    /// Skip the per-sample PNG files.
    #[arg(long)]
    pub no_png: bool,
    #[arg(long, default_value_t = 5)]
    pub montage_cols: usize,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Directory from `sample` (or any dataset directory).
    #[arg(long)]
    pub generated: PathBuf,
    /// Real dataset; a `prepare` root resolves to its test split.
    #[arg(long)]
    pub real: PathBuf,
    #[arg(long)]
    pub extractor: PathBuf,
    /// Report directory (default: the generated directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub kid_subset_size: Option<usize>,
    #[arg(long, default_value_t = sardiff::metrics::DEFAULT_KID_SUBSETS)]
    pub kid_subsets: usize,
    #[arg(long, default_value_t = 1)]
    pub is_splits: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ExtractorArgs {
    /// Labeled dataset; a `prepare` root also supplies its test split.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    /// Checkpoint file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ScheduleDumpArgs {
    #[arg(long, value_parser = parse_kind, default_value = "linear")]
    pub kind: ScheduleKind,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub beta_start: f64,
    #[arg(long, default_value_t = 0.02)]
    pub beta_end: f64,
    /// CSV path (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Prepare(a) => commands::prepare(a),
        Command::Train(a) => commands::train(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Sample(a) => commands::sample_cmd(a),
        Command::Evaluate(a) => commands::evaluate_cmd(a),
        Command::TrainExtractor(a) => commands::train_extractor(a),
        Command::ScheduleDump(a) => commands::schedule_dump(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(cli.log.as_str())).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
