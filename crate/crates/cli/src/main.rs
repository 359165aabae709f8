use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use oqsim_cli::compare::{compare, CompareOptions};
use oqsim_cli::{exit, CliError, Global};

#[derive(Parser)]
#[command(name = "oqsim", version, about = "Non-Markovian open quantum system simulations")]
struct Cli {
    /// Worker threads for trajectories and sweep points.
    #[arg(long, global = true, env = "OQSIM_WORKERS")]
    workers: Option<usize>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configuration and write `<name>.csv` plus `<name>.toml` metadata.
    Simulate { config: PathBuf },
    /// Dump the chain mapping of the configured spectral density.
    Chain { config: PathBuf },
    /// Build the dynamical map and write trace-distance, divisibility and rate series.
    Measure { config: PathBuf },
    /// Compare two result files observable by observable.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        tol: f64,
        /// Add this multiple of the combined standard error to the tolerance.
        #[arg(long, default_value_t = 0.0)]
        stderr_factor: f64,
        /// Resample the second file onto the first file's grid.
        #[arg(long)]
        interpolate: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let g = Global {
        workers,
        seed: cli.seed,
        out: cli.out,
    };
    let outcome: Result<(), CliError> = match cli.command {
        Command::Simulate { config } => oqsim_cli::simulate(&config, &g).map(|files| {
            for f in files {
                println!("{}", f.display());
            }
        }),
        Command::Chain { config } => oqsim_cli::chain(&config, &g).map(|f| println!("{}", f.display())),
        Command::Measure { config } => oqsim_cli::measure(&config, &g).map(|files| {
            for f in files {
                println!("{}", f.display());
            }
        }),
        Command::Compare {
            a,
            b,
            tol,
            stderr_factor,
            interpolate,
        } => compare(
            &a,
            &b,
            CompareOptions {
                tol,
                stderr_factor,
                interpolate,
            },
        )
        .and_then(|report| {
            print!("{}", report.render());
            if report.pass() {
                Ok(())
            } else {
                Err(CliError::CompareFailed(format!("{} vs {}", a.display(), b.display())))
            }
        }),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("oqsim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
