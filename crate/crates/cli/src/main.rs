//! `dpunet`: train, evaluate and inspect dynamic proximal unrolling networks.

mod gradcheck;
mod grid;
mod reconstruct;
mod settings;
mod train;

use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use dpunet::dyn_prox::{count_params, Variant};

/// Thread count for reconstruction and per-sample gradients.
const THREADS_ENV: &str = "DPUNET_THREADS";

/// Exit status when some grid cells failed; their rows are still written.
const EXIT_FAILED_CELLS: u8 = 3;

#[derive(Parser)]
#[command(
    name = "dpunet",
    version,
    about = "Dynamic proximal unrolling for compressive imaging"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write a checkpoint
    Train(train::TrainArgs),
    /// Reconstruct one image from simulated measurements
    Reconstruct(reconstruct::ReconstructArgs),
    /// Evaluate a checkpoint over (eta, alpha) cells and write CSV tables
    Grid(grid::GridArgs),
    /// Check end-to-end loss gradients against finite differences
    Gradcheck(gradcheck::GradcheckArgs),
    /// Print trainable parameter counts of the architecture variants
    ParamsCount(ParamsCountArgs),
}

#[derive(clap::Args)]
struct ParamsCountArgs {
    #[arg(long, default_value_t = 64)]
    channels: usize,
    #[arg(long, default_value_t = 10)]
    iterations: usize,
    /// Number of conditioning parameters
    #[arg(long, default_value_t = 1)]
    theta_dim: usize,
}

fn params_count(args: &ParamsCountArgs) -> anyhow::Result<()> {
    println!("variant,params");
    for v in Variant::ALL {
        let mut c = v.config(args.theta_dim);
        c.channels = args.channels;
        c.iterations = args.iterations;
        c.validate()?;
        println!("{v},{}", count_params(&c));
    }
    Ok(())
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .with_context(|| format!("{THREADS_ENV}={v:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    init_threads()?;
    match cli.command {
        Command::Train(a) => train::run(a)?,
        Command::Reconstruct(a) => reconstruct::run(a)?,
        Command::Grid(a) => {
            if !grid::run(a)? {
                return Ok(ExitCode::from(EXIT_FAILED_CELLS));
            }
        }
        Command::Gradcheck(a) => {
            if !gradcheck::run(a)? {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::ParamsCount(a) => params_count(&a)?,
    }
    Ok(ExitCode::SUCCESS)
}

/// The error chain joined by `: `, skipping causes already quoted by
/// their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}
