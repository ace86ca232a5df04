//! Command-line entry point: data generation, training, sampling,
//! evaluation, sampler benchmarking and the ablation grid.
//!
//! Every subcommand accepts `--config FILE` (flat `key=value` settings),
//! named flags that override the file, and `--set key=value` for any other
//! setting. Bad flags or settings exit with status 2, runtime failures with 1.

mod ablate;
mod commands;
pub mod dataset;
pub mod settings;
pub mod svg;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Error;

pub use ablate::{Axis, ABLATION_COLUMNS};

#[derive(Debug, Parser)]
#[command(name = "mdta2g", version, about = "Masked diffusion transformer for co-speech gesture generation")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a deterministic synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus its loss curve.
    Train(TrainArgs),
    /// Generate gestures for a dataset's conditions from a checkpoint.
    Sample(SampleArgs),
    /// Compute FGD, diversity, SRGR and beat alignment for generated gestures.
    Eval(EvalArgs),
    /// Time full against accelerated sampling.
    Bench(BenchArgs),
    /// Train, sample and evaluate one cell per value of a configuration axis.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Flat key=value settings file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override any setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for every random stream (default: $MDTA2G_SEED, else 0).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Number of sequences.
    #[arg(long)]
    n: Option<usize>,
    /// Frames per sequence.
    #[arg(long)]
    frames: Option<usize>,
    /// Skeleton: whole, upper or genericN.
    #[arg(long)]
    layout: Option<String>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct ModelFlags {
    /// Model size: XS, S, B or L.
    #[arg(long)]
    variant: Option<String>,
    /// Base mask ratio.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    wider: Option<bool>,
    #[arg(long)]
    shortcut: Option<bool>,
    /// full+unmasked, full or unmasked.
    #[arg(long)]
    input_mode: Option<String>,
    #[arg(long)]
    si_blocks: Option<usize>,
    #[arg(long)]
    encoder_depth: Option<usize>,
    #[arg(long)]
    decoder_depth: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Total number of optimizer steps (including resumed ones).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training crop length in frames (0 = whole sequences).
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Loss curve CSV (default: next to the checkpoint).
    #[arg(long, value_name = "FILE")]
    loss_csv: Option<PathBuf>,
    /// Also write the loss curve as an SVG chart.
    #[arg(long, value_name = "FILE")]
    svg: Option<PathBuf>,
    /// Continue from a checkpoint written by `train`.
    #[arg(long, value_name = "FILE")]
    resume: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct SamplerFlags {
    /// full or accel.
    #[arg(long)]
    mode: Option<String>,
    /// Network-free steps per anchor in accelerated mode.
    #[arg(long = "N")]
    skip: Option<usize>,
    #[arg(long)]
    scale: Option<f64>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Dataset directory supplying the conditions.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Only the first LIMIT sequences.
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    sampler: SamplerFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Ground-truth dataset directory.
    #[arg(long, value_name = "DIR")]
    truth: PathBuf,
    /// Directory of generated `.gesture` files, paired with the truth by order.
    #[arg(long, value_name = "DIR")]
    generated: PathBuf,
    /// Feature extractor checkpoint; trained on the truth set and saved here if missing.
    #[arg(long, value_name = "FILE")]
    extractor: Option<PathBuf>,
    /// Metric CSV (default: stdout only).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[arg(long)]
    label: Option<String>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Trained checkpoint; without one a freshly initialised model is timed.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Dataset supplying conditions; synthesized when absent.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Model size when no checkpoint is given (default B).
    #[arg(long)]
    variant: Option<String>,
    /// Comma-separated sampler modes.
    #[arg(long, default_value = "full,accel")]
    modes: String,
    /// Comma-separated skip values for accelerated mode.
    #[arg(long = "N", default_value = "20")]
    skips: String,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    runs: Option<usize>,
    /// Frames per sampled sequence.
    #[arg(long)]
    frames: Option<usize>,
    /// Sequences sampled together.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    layout: Option<String>,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// mask_ratio, wider, decoder_depth, si_blocks, shortcut, input_mode or all.
    #[arg(long)]
    axis: String,
    /// Comma-separated values (default: the axis' standard grid).
    #[arg(long)]
    values: Option<String>,
    /// Dataset directory; synthesized when absent.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    /// Frames per synthesized sequence.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    layout: Option<String>,
    /// Training steps per cell.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    variant: Option<String>,
    #[command(flatten)]
    sampler: SamplerFlags,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

/// How a command failed.
#[derive(Debug)]
pub enum Failure {
    /// Invalid flags or settings.
    Usage(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

pub(crate) trait UsageExt<T> {
    fn usage(self) -> Result<T, Failure>;
}

impl<T> UsageExt<T> for crate::Result<T> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(Failure::Usage)
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging(cli.verbose);
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
        Command::Ablate(a) => ablate::ablate(a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            eprintln!("run with --help for usage");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}
