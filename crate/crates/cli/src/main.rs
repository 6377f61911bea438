use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hyperred_cli::commands::{compare, fom_run, rom_build, rom_run};
use hyperred_cli::config::RunConfig;
use hyperred_cli::optimize::optimize;
use hyperred_cli::{CliError, EXIT_USAGE};

/// Full-order and hyper-reduced simulations of a notched damage-plasticity
/// plate. Any configuration key can be overridden with `--key=value`
/// (dotted paths for nested keys, e.g. `--reduction.tau=1e-3`).
#[derive(Parser)]
#[command(name = "hyperred", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full-order arc-length run; writes the record and snapshots.
    FomRun(Args),
    /// Builds a reduced basis, ECSW weights or DEIM operator from snapshots.
    RomBuild(Args),
    /// Reduced run from saved artifacts, compared against a reference run.
    RomRun(Args),
    /// Curve error between two run directories.
    Compare(Args),
    /// Brent search for the width that reaches a target limit load.
    Optimize(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
}

/// Splits `--key=value` overrides (any key but `config`) from the arguments
/// clap should see.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let mut keep = Vec::new();
    let mut overrides = Vec::new();
    for (i, a) in args.into_iter().enumerate() {
        if i > 0 && a.starts_with("--") && a.contains('=') && !a.starts_with("--config=") {
            overrides.push(a);
        } else {
            keep.push(a);
        }
    }
    (keep, overrides)
}

fn threads() -> Result<Option<usize>, CliError> {
    match std::env::var("HYPERRED_THREADS") {
        Ok(v) => v.parse::<usize>().ok().filter(|&n| n > 0).map(Some).ok_or_else(|| CliError::Usage(format!("HYPERRED_THREADS = `{v}` is not a positive integer"))),
        Err(_) => Ok(None),
    }
}

fn run(command: Command, overrides: &[String]) -> Result<String, CliError> {
    if let Some(n) = threads()? {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let load = |a: &Args| RunConfig::load(&a.config, overrides);
    Ok(match command {
        Command::FomRun(a) => {
            let cfg = load(&a)?;
            let out = fom_run(&cfg)?;
            format!("{} steps, max force {:.6} N, {:?}", out.summary.steps, out.summary.max_force, out.summary.termination)
        }
        Command::RomBuild(a) => {
            let s = rom_build(&load(&a)?)?;
            format!("{:?}: {} basis columns from {} snapshots, reduced elements {:?}", s.method, s.basis_columns, s.snapshots, s.reduced_elements)
        }
        Command::RomRun(a) => {
            let out = rom_run(&load(&a)?)?;
            match out.comparison {
                Some(c) => format!("{} steps, epsilon {:e}, element fraction {:.4}", out.run.summary.steps, c.epsilon, c.element_fraction),
                None => format!("{} steps", out.run.summary.steps),
            }
        }
        Command::Compare(a) => {
            let c = compare(&load(&a)?)?;
            format!("epsilon {:e} over {} samples ({} excluded)", c.epsilon, c.n, c.excluded_samples)
        }
        Command::Optimize(a) => {
            let r = optimize(&load(&a)?)?;
            format!("width {:.6} mm after {} evaluations (converged: {})", r.width, r.rows.len(), r.converged)
        }
    })
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    match run(cli.command, &overrides) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
