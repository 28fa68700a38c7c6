//! `structprompt`: train toy models, evaluate prompting modes, run ablations
//! and benchmark attention cost.

mod commands;
mod config;
mod report;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Axis;
use config::{CliResult, RunConfig};

/// Caps the worker threads used for evaluation.
const THREADS_ENV: &str = "STRUCTPROMPT_THREADS";

#[derive(Parser)]
#[command(name = "structprompt", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a toy model on a synthetic task family.
    Train(RunConfig),
    /// Evaluate every requested (mode, N, M) combination.
    Eval(RunConfig),
    /// Sweep one axis with the number of demonstrations held fixed.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
        #[command(flatten)]
        config: RunConfig,
    },
    /// Analytic and measured context-encoding cost over a grid of lengths and group counts.
    Bench(RunConfig),
}

fn cap_threads() -> CliResult<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = value.parse().map_err(|_| format!("{THREADS_ENV}={value:?} is not a thread count"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn run(cli: Cli) -> CliResult<bool> {
    cap_threads()?;
    let (report, cfg, out) = match cli.command {
        Command::Train(flags) => {
            let cfg = flags.resolve()?;
            let report = commands::train(&cfg)?;
            (report, cfg, None)
        }
        Command::Eval(flags) => {
            let cfg = flags.resolve()?;
            let report = commands::eval(&cfg)?;
            let out = cfg.out.clone();
            (report, cfg, out)
        }
        Command::Ablate { axis, config } => {
            let cfg = config.resolve()?;
            let report = commands::ablate(&cfg, axis)?;
            let out = cfg.out.clone();
            (report, cfg, out)
        }
        Command::Bench(flags) => {
            let cfg = flags.resolve()?;
            let report = commands::bench(&cfg)?;
            let out = cfg.out.clone();
            (report, cfg, out)
        }
    };
    commands::write_outputs(&report, &cfg, out.as_deref())?;
    Ok(!report.any_failed())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
