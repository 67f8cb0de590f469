//! `raplab`: score, prune, distill and audit a toy attention model.
//!
//! Exit status: 0 ok, 1 validation error, 2 check failure, 3 numeric divergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rap_core::budget::BudgetMode;
use rap_core::factorize::Method;

use crate::commands::{CheckFailed, Diverged};
use crate::config::{Overrides, RunConfig, Scoring};

#[derive(Parser)]
#[command(name = "raplab", version, about = "RoPE-aligned KV-cache pruning on a toy attention model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Compression ratio in [0, 1).
    #[arg(long, global = true)]
    rho: Option<f64>,
    #[arg(long, global = true)]
    method: Option<Method>,
    #[arg(long, global = true, value_enum)]
    scoring: Option<Scoring>,
    #[arg(long, global = true, value_enum)]
    budget: Option<Budget>,
    /// Global seed (default 42).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Budget {
    Adaptive,
    Uniform,
}

#[derive(Subcommand)]
enum Command {
    /// Build (or load) the dense base model and write pair scores.
    Score,
    /// Allocate budgets and write the compressed checkpoint and manifest.
    Prune,
    /// Distill the compressed model against the base with low-rank adapters.
    Distill,
    /// Resource report for the configured method over the configured ratios.
    Report,
    /// Run the structural checks and write a JSON summary.
    Verify,
    /// Resource report for every method over the configured ratios.
    Sweep,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        2
    } else if err.downcast_ref::<Diverged>().is_some()
        || matches!(err.downcast_ref::<rap_core::Error>(), Some(rap_core::Error::NonFinite(_)))
    {
        3
    } else {
        1
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let flags = Overrides {
        rho: cli.rho,
        method: cli.method,
        scoring: cli.scoring,
        budget: cli.budget.map(|b| match b {
            Budget::Adaptive => BudgetMode::Adaptive,
            Budget::Uniform => BudgetMode::Uniform,
        }),
        seed: cli.seed,
        out: cli.out,
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &flags)?;
    let written = match cli.command {
        Command::Score => commands::score(&cfg)?,
        Command::Prune => commands::prune(&cfg)?,
        Command::Distill => commands::distill_cmd(&cfg)?,
        Command::Report => commands::report(&cfg)?,
        Command::Sweep => commands::sweep_cmd(&cfg)?,
        Command::Verify => {
            let (written, passed) = commands::verify_cmd(&cfg)?;
            for p in &written {
                println!("{}", p.display());
            }
            if !passed {
                return Err(CheckFailed("see verify.json".into()).into());
            }
            return Ok(());
        }
    };
    for p in &written {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors count as validation errors.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
