//! Command-line interface: dataset generation, model fitting, experiment
//! grids, factor matching, and bundle inspection.

mod bench;
mod commands;

use clap::{Parser, Subcommand};

/// Exit codes: 0 success, 2 no feasible run, 3 invalid input,
/// 4 numerical failure.
fn exit_code(err: &anyhow::Error) -> i32 {
    if let Some(core) = err.downcast_ref::<parafac2_core::Error>() {
        match core {
            parafac2_core::Error::NoFeasibleRun => 2,
            parafac2_core::Error::NumericalFailure(_) | parafac2_core::Error::SingularSystem(_) => {
                4
            }
            _ => 3,
        }
    } else {
        3
    }
}

#[derive(Parser)]
#[command(
    name = "parafac2",
    about = "PARAFAC2 / tPARAFAC2 factorization toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic dataset bundles with ground truth and masks.
    Generate(commands::GenerateArgs),
    /// Fit a model to a dataset bundle and write the best run.
    Fit(commands::FitArgs),
    /// Run a full experiment grid and aggregate results as CSV.
    Benchmark(bench::BenchmarkArgs),
    /// Factor match score between two factor bundles.
    Fms(commands::FmsArgs),
    /// Summarize a bundle directory.
    Inspect(commands::InspectArgs),
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => commands::generate(&args),
        Command::Fit(args) => commands::fit(&args),
        Command::Benchmark(args) => bench::benchmark(&args),
        Command::Fms(args) => commands::fms(&args),
        Command::Inspect(args) => commands::inspect(&args),
    };
    if let Err(err) = result {
        eprintln!("error: {:#}", err);
        std::process::exit(exit_code(&err));
    }
}
