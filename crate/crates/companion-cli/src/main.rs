//! Experiment runner for companion-regularized training.
//!
//! Subcommands: `train` (one method over seeds), `compare` (several
//! methods/grids on paired seeds), `gen-data` (materialize synthetic
//! data as CSV), `metrics` (recompute diagnostics from a checkpoint).
//! Verbosity via `COMPANION_LOG=debug|info` (default `warn`).

mod config;
mod report;
mod runner;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "companion", version, about = "Companion-regularized SGD training runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one method on every configured seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Shift every configured seed by this amount.
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
    },
    /// Run several methods/grid points on identical seeds and batches.
    Compare {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write the synthetic dataset of a config as CSV files.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Train-split CSV path; the test split lands at `<stem>.test.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute metrics for a checkpoint on a CSV dataset.
    Metrics {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also dump the per-class histogram as nested JSON counts.
        #[arg(long)]
        hist_out: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("COMPANION_LOG", "warn"))
        .format_timestamp(None)
        .init();

    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train {
            config,
            out,
            seed_offset,
        } => runner::cmd_train(&config, out, seed_offset),
        Command::Compare { config } => runner::cmd_compare(&config),
        Command::GenData { config, out } => runner::cmd_gen_data(&config, &out),
        Command::Metrics {
            checkpoint,
            data,
            hist_out,
        } => runner::cmd_metrics(&checkpoint, &data, hist_out),
    };

    if let Err(failure) = outcome {
        eprintln!("error: {}", failure.message);
        std::process::exit(failure.code);
    }
}
