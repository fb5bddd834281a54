//! `dcontrol`: solve, sweep and simulate density-control experiments.
//!
//! Exit codes: 0 converged, 1 configuration error, 2 solver did not converge
//! or failed (artifacts of a finished solve are still written).

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use run::Failure;

#[derive(Parser)]
#[command(name = "dcontrol", version, about = "Density control of interacting agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the configured experiment and write its artifacts.
    Solve { config: PathBuf },
    /// Solve once per value of a scalar config key.
    Sweep {
        config: PathBuf,
        /// Dotted key path, e.g. `potential.beta`.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Simulate the closed loop under a stored policy.
    Simulate {
        config: PathBuf,
        /// `policy.csv` from an earlier grid_single solve.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
}

fn read(path: &PathBuf) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))
}

fn execute(cli: Cli) -> Result<bool, Failure> {
    match cli.command {
        Command::Solve { config } => Ok(run::run(&config::parse(&read(&config)?)?)?.converged),
        Command::Sweep { config, param, values } => {
            let doc: serde_json::Value =
                serde_json::from_str(&read(&config)?).map_err(|e| Failure::Config(format!("invalid config: {e}")))?;
            run::sweep(&doc, &param, &values)
        }
        Command::Simulate { config, policy } => {
            Ok(run::simulate(&config::parse(&read(&config)?)?, policy.as_deref())?.converged)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("warning: solver did not converge; artifacts written");
            ExitCode::from(2)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
