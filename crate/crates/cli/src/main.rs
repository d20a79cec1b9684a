//! `pgprec`: synthetic data generation, pre-training, prompt-tuning,
//! evaluation and statistics from the command line.
//!
//! Exit status: 0 success, 2 usage or configuration, 3 checkpoint, 4 data,
//! 5 numeric failure.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pgprec::ErrorKind;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Output(String),
    #[error(transparent)]
    Core(#[from] pgprec::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Output(_) => 4,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Checkpoint => 3,
                ErrorKind::Data => 4,
                ErrorKind::Numeric => 5,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "pgprec",
    version,
    about = "Prompt-tuned graph recommender for cross-domain transfer"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Extra key=value overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TuneMode {
    Prompt,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Part {
    Valid,
    Test,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic source/target pair and item relations.
    Synth,
    /// Pre-train the encoder on the source domain.
    Pretrain {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
    },
    /// Prompt-tune or fully fine-tune a pre-trained encoder on the target domain.
    Tune {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        relations: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: TuneMode,
    },
    /// Evaluate one or more tuned models on a split; two or more add significance tests.
    Eval {
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        part: Part,
        /// Cutoff; defaults to the `eval_k` setting (10).
        #[arg(long)]
        k: Option<usize>,
        /// Epoch logs of two runs for a timing comparison.
        #[arg(long, num_args = 2, value_names = ["FIRST", "SECOND"])]
        timing: Vec<PathBuf>,
    },
    /// Report tuned versus full parameter counts of a model.
    Params {
        #[arg(long)]
        model: PathBuf,
    },
    /// Paired t-tests and TOST between two per-user metric files.
    Stats {
        #[arg(long)]
        first: PathBuf,
        #[arg(long)]
        second: PathBuf,
    },
}

fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("PGPREC_THREADS") {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            CliError::Usage(format!("PGPREC_THREADS={v:?} is not a positive integer"))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let ctx = commands::Context::new(&cli.common)?;
    match cli.command {
        Command::Synth => commands::synth(&ctx),
        Command::Pretrain { source, target } => commands::pretrain(&ctx, &source, &target),
        Command::Tune {
            source,
            target,
            relations,
            checkpoint,
            mode,
        } => commands::tune(&ctx, &source, &target, &relations, &checkpoint, mode),
        Command::Eval {
            models,
            split,
            part,
            k,
            timing,
        } => commands::eval(&ctx, &models, &split, part, k, &timing),
        Command::Params { model } => commands::params(&ctx, &model),
        Command::Stats { first, second } => commands::stats(&ctx, &first, &second),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
