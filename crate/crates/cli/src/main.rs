//! `stos`: generate FLASH planning phantoms, solve them with stochastic
//! three-operator splitting, evaluate plans and compare gradient estimators.
//!
//! Exit codes: 0 success / converged, 2 stopped on the epoch budget, 1 error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::EXIT_ERROR;
use crate::config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "stos", version, about = "Stochastic three-operator splitting for FLASH treatment planning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunFlags {
    /// JSON run configuration; flags below take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Problem directory (replaces any phantom in the config).
    #[arg(long)]
    problem: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Step size; omitted means 0.9 x the step threshold.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunFlags {
    fn resolve(self, estimator: Option<String>) -> anyhow::Result<RunConfig> {
        let file = RunConfig::load_or_default(self.config.as_deref())?;
        Ok(Overrides {
            problem_dir: self.problem,
            seed: self.seed,
            estimator,
            batch_size: self.batch_size,
            gamma: self.gamma,
            epochs: self.epochs,
            out: self.out,
        }
        .apply(file))
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic phantom problem directory.
    Generate {
        /// Config whose `phantom` key gives the phantom spec.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_voxels: Option<usize>,
        #[arg(long)]
        n_spots: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve one problem with one estimator.
    Solve {
        #[command(flatten)]
        run: RunFlags,
        /// One of full, sgd, saga, sarah, sag, svrg.
        #[arg(long)]
        estimator: Option<String>,
    },
    /// Plan metrics and DVH / DRVH curves for given spot weights.
    Metrics {
        #[arg(long)]
        problem: PathBuf,
        /// Spot weights, one per line (e.g. `final_x.vec`).
        #[arg(long)]
        x: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run several estimators with a shared seed and epoch budget.
    Compare {
        #[command(flatten)]
        run: RunFlags,
        /// Comma-separated estimator names.
        #[arg(long, value_delimiter = ',')]
        estimators: Option<Vec<String>>,
    },
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Generate {
            config,
            seed,
            n_voxels,
            n_spots,
            out,
        } => commands::generate(RunConfig::load_or_default(config.as_deref())?, seed, n_voxels, n_spots, &out),
        Command::Solve { run, estimator } => commands::solve(run.resolve(estimator)?),
        Command::Metrics { problem, x, out } => commands::metrics(&problem, &x, &out),
        Command::Compare { run, estimators } => commands::compare(run.resolve(None)?, estimators),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
