//! Command-line front end for the crowd counting library: synthesize data,
//! render density labels, train, evaluate, predict on single images, and run
//! the numerical verification suites.
//!
//! Exit codes: 0 on success, 1 when a run fails at runtime (I/O, checkpoint,
//! non-finite loss, verification mismatch), 2 when the invocation or the
//! configuration is wrong.

mod commands;
mod config;
mod data;
mod verify;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Top-level failure split by exit code: configuration problems get 2,
/// everything that went wrong while doing the work gets 1.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(2),
            CliError::Runtime(_) => ExitCode::from(1),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) | CliError::Runtime(msg) => f.write_str(msg),
        }
    }
}

impl From<crowdcount_core::Error> for CliError {
    fn from(err: crowdcount_core::Error) -> Self {
        match err {
            e @ crowdcount_core::Error::Config { .. } => CliError::Config(e.to_string()),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "crowdcount",
    version,
    about = "Density-map crowd counting: synthetic data, labels, training, evaluation",
    after_help = "Builds with the `parallel` feature honor RAYON_NUM_THREADS to bound worker \
                  threads; the sequential build ignores it."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test split of crowd scenes
    Synth(SynthArgs),
    /// Render Gaussian density labels for annotated images
    GenLabels(GenLabelsArgs),
    /// Train a model from a run configuration file
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labelled directory
    Eval(EvalArgs),
    /// Predict the head count of a single image
    Predict(PredictArgs),
    /// Run the numerical verification suites
    Verify(VerifyArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory; receives train/, test/, and manifest.json
    #[arg(long)]
    out: PathBuf,
    /// Number of training scenes
    #[arg(long, default_value_t = 8)]
    train: usize,
    /// Number of test scenes
    #[arg(long, default_value_t = 4)]
    test: usize,
    /// Master seed; the same seed regenerates the identical split
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    /// Smallest per-scene head count
    #[arg(long, default_value_t = 5)]
    min_heads: usize,
    /// Largest per-scene head count
    #[arg(long, default_value_t = 30)]
    max_heads: usize,
    /// Smallest head disc radius in pixels
    #[arg(long, default_value_t = 2.0)]
    radius_min: f64,
    /// Largest head disc radius in pixels
    #[arg(long, default_value_t = 6.0)]
    radius_max: f64,
    /// Background style: flat, gradient, or noise
    #[arg(long, default_value = "gradient")]
    background: String,
    /// Draw head positions from a Gaussian mixture instead of uniformly
    #[arg(long)]
    clustered: bool,
}

#[derive(Args)]
pub struct GenLabelsArgs {
    /// Directory of .ppm images with annotation sidecars
    #[arg(long)]
    data: PathBuf,
    /// Where to write the .density.csv files (defaults to the data directory)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Annotation sidecar format: json or csv
    #[arg(long, default_value = "json")]
    format: String,
    /// Bandwidth selection: fixed or adaptive
    #[arg(long, default_value = "fixed")]
    mode: String,
    /// Kernel bandwidth in pixels (fixed mode)
    #[arg(long, default_value_t = 4.0)]
    sigma: f64,
    /// Neighbour count for the local spacing estimate (adaptive mode)
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Spacing-to-bandwidth factor (adaptive mode)
    #[arg(long, default_value_t = 0.3)]
    beta: f64,
    /// Lower bandwidth clamp in pixels (adaptive mode)
    #[arg(long, default_value_t = 1.0)]
    sigma_min: f64,
    /// Upper bandwidth clamp in pixels (adaptive mode)
    #[arg(long, default_value_t = 15.0)]
    sigma_max: f64,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Run configuration file (TOML); omitted sections take defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training data directory (overrides [paths] data)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoints and metrics (overrides [paths] out)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial learning rate
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Square crop side in pixels used for augmentation
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint file written by train
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of labelled images to score
    #[arg(long)]
    data: PathBuf,
    /// Write the full report as JSON here
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write a per-image predicted-vs-true CSV here
    #[arg(long)]
    scatter: Option<PathBuf>,
    /// Comma-separated count bounds for density-level breakdown, e.g. 10,50
    #[arg(long)]
    levels: Option<String>,
}

#[derive(Args)]
pub struct PredictArgs {
    /// Checkpoint file written by train
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image (.ppm)
    #[arg(long)]
    image: PathBuf,
    /// Write the predicted density map as CSV here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct VerifyArgs {
    /// Which suite to run: grads, rcloss, or all
    #[arg(long, default_value = "all")]
    suite: String,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth(args) => commands::cmd_synth(args),
        Command::GenLabels(args) => commands::cmd_gen_labels(args),
        Command::Train(args) => commands::cmd_train(args),
        Command::Eval(args) => commands::cmd_eval(args),
        Command::Predict(args) => commands::cmd_predict(args),
        Command::Verify(args) => verify::cmd_verify(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err);
            err.exit_code()
        }
    }
}
