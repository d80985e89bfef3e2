//! `mohn`: generate data, train, evaluate and inspect momentum-contrastive runs.
//!
//! Exit codes: 0 success, 1 numeric or acceptance failure, 2 usage or config
//! error, 3 I/O error. Human-readable output goes to stderr; machine-readable
//! results go to stdout.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mohn::encoder::Activation;
use mohn::Error;

#[derive(Debug, Parser)]
#[command(name = "mohn", version, about = "Contrastive training with a momentum key encoder and a filtered memory bank")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic Gaussian-cluster dataset as CSV.
    GenData(GenDataArgs),
    /// Train from a config file, optionally resuming from a checkpoint.
    Train(TrainArgs),
    /// Weighted KNN top-1 of a checkpoint's query encoder.
    EvalKnn(EvalKnnArgs),
    /// Finite-difference check of the analytic loss gradient.
    GradCheck(GradCheckArgs),
    /// Dump memory-bank rows of a checkpoint as CSV.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.1)]
    pub spread: f64,
    #[arg(long, default_value_t = 3)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML config; may be omitted when resuming.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub sgd_momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub queue_capacity: Option<usize>,
    #[arg(long)]
    pub momentum_coefficient: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Override a nested key, e.g. `--set loss.temperature=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Suppress metrics rows on stdout.
    #[arg(long)]
    pub quiet: bool,
}

impl TrainArgs {
    /// True when anything would change the config stored in a checkpoint.
    pub fn has_overrides(&self) -> bool {
        self.config.is_some()
            || !self.overrides.is_empty()
            || self.learning_rate.is_some()
            || self.sgd_momentum.is_some()
            || self.weight_decay.is_some()
            || self.epochs.is_some()
            || self.batch_size.is_some()
            || self.queue_capacity.is_some()
            || self.momentum_coefficient.is_some()
            || self.seed.is_some()
            || self.eval_interval.is_some()
            || self.checkpoint_interval.is_some()
            || self.output_dir.is_some()
    }
}

#[derive(Debug, Args)]
pub struct EvalKnnArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset CSV, or a CIFAR directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Neighbors; defaults to the checkpoint's config, capped at the training size.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 32)]
    pub queue: usize,
    #[arg(long, value_enum, default_value_t = ActivationArg::Relu)]
    pub activation: ActivationArg,
    #[arg(long, hide = true)]
    pub corrupt_gradient: bool,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum ActivationArg {
    Relu,
    Tanh,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Tanh => Activation::Tanh,
        }
    }
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Bank row used as the similarity probe.
    #[arg(long, default_value_t = 0, conflicts_with = "probe")]
    pub probe_row: usize,
    /// Explicit probe vector, comma separated; normalized before use.
    #[arg(long, allow_hyphen_values = true)]
    pub probe: Option<String>,
}

/// Failure carrying its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) | Error::MissingFile(_) | Error::CorruptCheckpoint(_) | Error::VersionMismatch { .. } => 3,
            Error::ConfigInvalid(_)
            | Error::InvalidShape(_)
            | Error::InvalidSpec(_)
            | Error::KTooLarge { .. }
            | Error::IndivisibleCapacity { .. }
            | Error::BatchTooLarge { .. }
            | Error::InvalidCapacity { .. }
            | Error::InvalidSubsetSize { .. }
            | Error::DimensionMismatch { .. }
            | Error::TruncatedRecord { .. }
            | Error::LabelOutOfRange { .. }
            | Error::InvalidImage(_) => 2,
            _ => 1,
        };
        Self { code, message: e.to_string() }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_target(false)
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::EvalKnn(a) => commands::eval_knn(a),
        Command::GradCheck(a) => commands::grad_check(a),
        Command::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
