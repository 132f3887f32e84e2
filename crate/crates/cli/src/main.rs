//! `edmkit` command-line workbench.
//!
//! Every command prints a one-line JSON summary on stdout, writes its
//! artifacts atomically and stores the resolved configuration next to its
//! main output as `<out>.config.json`. Passing that file back with
//! `--config` reproduces the run.
//!
//! Exit codes: 0 on success, 1 on runtime errors or when some items failed,
//! 2 on usage and parameter errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod common;
mod engine;

use commands::*;
use common::{CliResult, Outcome};

#[derive(Debug, Parser)]
#[command(
    name = "edmkit",
    version,
    about = "fBm distance-matrix ensembles, completion and diffusion inpainting"
)]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    Generate(generate::GenerateArgs),
    Mask(mask::MaskArgs),
    Complete(complete::CompleteArgs),
    Sample(sample::SampleArgs),
    Metrics(metrics::MetricsArgs),
    Fish(fish::FishArgs),
    Sweep(sweep::SweepArgs),
    Rigidity(rigidity::RigidityArgs),
}

fn dispatch(cli: Cli) -> CliResult<Outcome> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(common::usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| common::usage(e.to_string()))?;
    }
    let config = cli.config.as_deref();
    match cli.command {
        Command::Generate(a) => generate::run(a, config),
        Command::Mask(a) => mask::run(a, config),
        Command::Complete(a) => complete::run(a, config),
        Command::Sample(a) => sample::run(a, config),
        Command::Metrics(a) => metrics::run(a, config),
        Command::Fish(a) => fish::run(a, config),
        Command::Sweep(a) => sweep::run(a, config),
        Command::Rigidity(a) => rigidity::run(a, config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            if outcome.failed.is_empty() {
                ExitCode::SUCCESS
            } else {
                for f in &outcome.failed {
                    eprintln!("failed: {f}");
                }
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
