//! `vardfs` — dynamic feature selection over variable feature sets.
//!
//! Exit codes: 0 ok, 1 selfcheck failure, 2 configuration error, 3 numeric
//! failure (training divergence).

mod commands;
mod spec;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vardfs_core::error::CoreError;

#[derive(Parser)]
#[command(name = "vardfs", version, about = "Greedy dynamic feature selection with feature descriptors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train policy and predictor per a run spec; writes checkpoint, loss CSV, summary
    Train {
        #[arg(long)]
        spec: PathBuf,
        /// Override the spec's seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Accuracy per budget on the test split
    Eval {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated ascending budgets, e.g. 1,5,10
        #[arg(long, value_delimiter = ',')]
        budgets: Vec<usize>,
        /// Also train and evaluate the jointly-trained random-selector baseline
        #[arg(long)]
        with_random_baseline: bool,
    },
    /// Selection-frequency grid (CSV + PGM) for an image dataset
    Heatmap {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        budget: usize,
    },
    /// Train on a synthetic spec and report agreement with the exact-CMI oracle
    OracleCheck {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Gradient finite-difference, Gumbel-max frequency, and permutation suites
    Selfcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn exit_code_for(err: &CoreError) -> u8 {
    match err {
        CoreError::Diverged { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("VARDFS_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { spec, seed } => commands::cmd_train(&spec, seed),
        Command::Eval { spec, checkpoint, budgets, with_random_baseline } => {
            commands::cmd_eval(&spec, &checkpoint, &budgets, with_random_baseline)
        }
        Command::Heatmap { spec, checkpoint, budget } => {
            commands::cmd_heatmap(&spec, &checkpoint, budget)
        }
        Command::OracleCheck { spec } => commands::cmd_oracle_check(&spec),
        Command::Selfcheck { seed } => match commands::cmd_selfcheck(seed) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
