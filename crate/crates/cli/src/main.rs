//! `irrvis`: weighted analyses of irregularly observed longitudinal data,
//! sensitivity calibration and simulation studies, driven by a TOML config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use irrvis::par::Execution;

use commands::{NumericFailure, Run};

#[derive(Debug, Parser)]
#[command(name = "irrvis", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true, env = "IRRVIS_THREADS")]
    threads: Option<usize>,

    /// Log progress and warnings to stderr (repeat for more detail).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Weighted marginal model over the phi grid.
    Analyze,
    /// Suggest a range for the sensitivity parameter.
    Calibrate,
    /// Run a simulation study and score the estimators.
    Simulate,
    /// Export visit weights and balance diagnostics at one phi.
    Weights,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Analyze => "analyze",
            Command::Calibrate => "calibrate",
            Command::Simulate => "simulate",
            Command::Weights => "weights",
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = cli
        .config
        .ok_or_else(|| anyhow::anyhow!("--config is required"))?;
    let execution = match cli.threads {
        Some(0) => anyhow::bail!("--threads must be at least 1"),
        Some(1) => Execution::Sequential,
        Some(n) => {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
            Execution::Parallel
        }
        None => Execution::Parallel,
    };
    let ctx = Run::load(cli.command.name(), &config, cli.output, execution)?;
    match cli.command {
        Command::Analyze => commands::analyze(&ctx),
        Command::Calibrate => commands::calibrate_cmd(&ctx),
        Command::Simulate => commands::simulate(&ctx),
        Command::Weights => commands::weights(&ctx),
    }
}

/// 2 for numerical failures, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().any(|cause| {
        cause.downcast_ref::<irrvis::Error>().is_some_and(irrvis::Error::is_numeric)
            || cause.downcast_ref::<NumericFailure>().is_some()
    });
    if numeric {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
