mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use molgnn::train::ModelKind;
use molgnn::verify::Suite;

use crate::config::Overrides;
use crate::error::CliResult;

#[derive(Parser)]
#[command(
    name = "molgnn",
    version,
    about = "Train and evaluate 2D and 3D molecular graph networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Re-draw train/valid partitions of a base split into several folds.
    PrepareSplits {
        #[arg(long)]
        base_split: PathBuf,
        /// Graphs file used to check that every split id exists.
        #[arg(long)]
        graphs: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on a split.
    Train {
        #[arg(long)]
        model: ModelKind,
        #[arg(long)]
        graphs: PathBuf,
        /// Required for 3d models.
        #[arg(long)]
        conformers: Option<PathBuf>,
        #[arg(long)]
        split: PathBuf,
        /// TOML file with [model] and [train] sections; built-in defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Fixed feature vocabulary; inferred from the graphs otherwise.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        hidden_dim: Option<usize>,
        #[arg(long)]
        deterministic: bool,
        /// Suppress per-epoch progress lines.
        #[arg(long, short)]
        quiet: bool,
    },
    /// Write predictions of a checkpoint for a list of ids.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long)]
        conformers: Option<PathBuf>,
        /// Text file with one molecule id per line.
        #[arg(long)]
        ids: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
    },
    /// Average several prediction files.
    Ensemble {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run built-in correctness checks.
    Verify {
        /// Suite to run; repeat for several. All suites when omitted.
        #[arg(long)]
        suite: Vec<Suite>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_gradients: bool,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::PrepareSplits {
            base_split,
            graphs,
            folds,
            seed,
            out,
        } => commands::prepare_splits(commands::PrepareSplitsArgs {
            graphs,
            base_split,
            folds,
            seed,
            out,
        }),
        Command::Train {
            model,
            graphs,
            conformers,
            split,
            config,
            vocab,
            out,
            epochs,
            batch_size,
            lr,
            seed,
            hidden_dim,
            deterministic,
            quiet,
        } => commands::train(commands::TrainArgs {
            model,
            graphs,
            conformers,
            split,
            config,
            vocab,
            out,
            overrides: Overrides {
                epochs,
                batch_size,
                lr,
                seed,
                hidden_dim,
                deterministic,
            },
            quiet,
        }),
        Command::Predict {
            checkpoint,
            graphs,
            conformers,
            ids,
            out,
            batch_size,
        } => commands::predict(commands::PredictArgs {
            checkpoint,
            graphs,
            conformers,
            ids,
            out,
            batch_size,
        }),
        Command::Ensemble { inputs, out } => commands::ensemble(&inputs, &out),
        Command::Verify {
            suite,
            seed,
            corrupt_gradients,
        } => {
            let suites = if suite.is_empty() { Suite::ALL.to_vec() } else { suite };
            commands::verify(&suites, seed, corrupt_gradients)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
