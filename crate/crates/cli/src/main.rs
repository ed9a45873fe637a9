//! `gaitmil`: synthetic data, training, evaluation and MIL ablations.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data, schema or
//! I/O error, 4 numeric failure. Errors are printed to stderr as one JSON
//! object on a single line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use gaitmil::Error;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "gaitmil", version, about = "Gait-MIL training and evaluation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic silhouette dataset.
    Synth(SynthArgs),
    /// Train a model and write its checkpoint and step log.
    Train(TrainArgs),
    /// Evaluate a checkpoint, optionally on a class-ratio split.
    Eval(EvalArgs),
    /// Train with and without MIL pooling and compare.
    Ablate(AblateArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON synth config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Subjects per class.
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// Per-pixel flip probability.
    #[arg(long)]
    pub noise: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct DataArgs {
    /// Dataset root.
    #[arg(long, env = "GAITMIL_DATA")]
    pub data: PathBuf,
    /// Manifest path [default: <data>/manifest.json].
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// JSON train config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Final checkpoint path. Periodic checkpoints go next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Step log, one JSON object per line [default: <out> with extension log.jsonl].
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable bag clustering and attention pooling over bags.
    #[arg(long)]
    pub no_mil: bool,
    #[arg(long, value_enum, default_value = "f32")]
    pub dtype: Dtype,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSON eval config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Class ratio `P:N:G`, e.g. 1:1:8. Omit to evaluate the whole pool.
    #[arg(long)]
    pub ratio: Option<String>,
    /// Split size budget [default: pool size].
    #[arg(long)]
    pub total: Option<usize>,
    /// Seed of the split draw.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report path [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write per-sequence predictions as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Held-out dataset root [default: the training data].
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// JSON train config shared by both arms.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for both checkpoints, logs and the comparison JSON.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "f32")]
    pub dtype: Dtype,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Usage,
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Serialize)]
pub struct CliError {
    #[serde(rename = "error")]
    pub kind: ErrorKind,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
}

impl CliError {
    fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
            key: None,
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Usage, message)
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Config, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Data, message)
    }

    pub fn with_key(mut self, key: Option<String>) -> Self {
        self.key = key;
        self
    }

    pub fn code(&self) -> u8 {
        match self.kind {
            ErrorKind::Usage | ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match e {
            Error::Argument(_) => ErrorKind::Usage,
            Error::Config(_) => ErrorKind::Config,
            Error::Schema(_) | Error::Dataset { .. } | Error::Io { .. } => ErrorKind::Data,
            Error::Numeric(_) => ErrorKind::Numeric,
        };
        Self::new(kind, e.to_string())
    }
}

fn command() -> clap::Command {
    Cli::command()
        .after_long_help(config::all_keys())
        .mut_subcommand("synth", |c| c.after_long_help(config::synth_keys()))
        .mut_subcommand("train", |c| c.after_long_help(config::train_keys()))
        .mut_subcommand("eval", |c| c.after_long_help(config::eval_keys()))
        .mut_subcommand("ablate", |c| c.after_long_help(config::train_keys()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
    }
}

fn fail(err: CliError) -> ExitCode {
    eprintln!("{}", serde_json::to_string(&err).expect("error serializes"));
    ExitCode::from(err.code())
}

fn main() -> ExitCode {
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return fail(CliError::usage(first.trim_start_matches("error: ")));
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => return fail(CliError::usage(e.to_string().trim())),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}
