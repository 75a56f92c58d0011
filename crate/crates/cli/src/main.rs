//! `pat`: simulate datasets, train unrolled reconstructions, run the LSQR
//! baseline, evaluate and self-check.

mod commands;
mod config;
mod diagnose;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "pat", version, about = "Limited-view photoacoustic reconstruction with invertible unrolled networks")]
struct Cli {
    /// JSON run configuration; every key is optional.
    #[arg(long, global = true, env = "PAT_CONFIG")]
    config: Option<PathBuf>,
    /// Override a config value by dotted path, e.g. `--set train.epochs_per_stage=10`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for per-sample parallel work.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the effective configuration as JSON.
    Config,
    /// Generate phantoms, simulate noisy subsampled traces, write a dataset.
    Simulate {
        /// Existing output directory (default: paths.dataset).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of samples (default: data.n_samples).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Greedy stagewise training; resumes from completed stages in `--out`.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Existing checkpoint directory (default: paths.checkpoints).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply a trained plan to receiver traces.
    Reconstruct {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// LSQR baseline on receiver traces.
    Lsqr {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Residual history file (default: `<out>` with extension `residuals.txt`).
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// MSE/PSNR of estimates against a ground truth, plus slice and MIP panels.
    Eval {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long = "estimate")]
        estimates: Vec<PathBuf>,
        /// Traces whose first misfit gradient is exported as an extra panel.
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Existing directory for PGM panels (default: paths.output).
        #[arg(long)]
        panels: Option<PathBuf>,
    },
    /// Adjoint, invertibility, gradient and memory self-checks.
    Diagnose {
        /// Replace the adjoint by a perturbed one (negative control).
        #[arg(long)]
        sabotage_adjoint: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads == 0 {
        return Err(CliError::Config("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let (cfg, resolved) = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
            Ok(())
        }
        Command::Simulate { out, n } => commands::simulate(&cfg, &resolved, out, n),
        Command::Train { dataset, out } => commands::train(&cfg, dataset, out),
        Command::Reconstruct { checkpoint, traces, out } => commands::reconstruct(&cfg, &resolved, checkpoint, &traces, &out),
        Command::Lsqr { traces, out, history } => commands::lsqr(&cfg, &resolved, &traces, &out, history),
        Command::Eval { truth, estimates, traces, panels } => commands::eval(&cfg, &resolved, &truth, &estimates, traces, panels),
        Command::Diagnose { sabotage_adjoint } => diagnose::run(&cfg, &resolved, sabotage_adjoint),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
