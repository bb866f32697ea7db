use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vpcharge_cli::run::prepare;
use vpcharge_cli::{cmd_ladder, cmd_run, parse_scenario, CliError, Scenario, EXIT_FAILURE, WORKERS_ENV};

/// Weighted-particle simulator for a 2-D plasma attracted by point charges.
#[derive(Parser)]
#[command(name = "vpcharge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write diagnostics.csv, trajectories.csv, summary.txt.
    Run {
        scenario: PathBuf,
        /// Output directory, overriding `[output] directory`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the scenario over its epsilon ladder and compare the runs.
    Ladder {
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate a scenario and print its canonical form with all defaults.
    Check { scenario: PathBuf },
}

fn load(path: &Path) -> Result<Scenario, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(parse_scenario(&text)?)
}

fn configure_workers() -> Result<(), String> {
    let Ok(value) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{WORKERS_ENV} must be a positive integer, got '{value}'"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn dispatch(command: Command) -> Result<i32, CliError> {
    match command {
        Command::Run { scenario, out } => {
            let s = load(&scenario)?;
            let dir = out.unwrap_or_else(|| s.output_dir.clone());
            let report = cmd_run(&s, &dir)?;
            for (k, v) in &report.summary.entries {
                println!("{k} = {v}");
            }
            Ok(report.exit_code)
        }
        Command::Ladder { scenario, out } => {
            let s = load(&scenario)?;
            let dir = out.unwrap_or_else(|| s.output_dir.clone());
            let report = cmd_ladder(&s, &dir)?;
            for (k, v) in &report.summary.entries {
                println!("{k} = {v}");
            }
            Ok(report.exit_code)
        }
        Command::Check { scenario } => {
            let s = load(&scenario)?;
            let p = prepare(&s)?;
            print!("{}", s.echo());
            println!("# effective blob_width = {:e}", p.blob_width);
            println!("# effective dt = {:e}", p.dt);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = configure_workers() {
        eprintln!("vpcharge: {msg}");
        return ExitCode::from(EXIT_FAILURE as u8);
    }
    let code = match dispatch(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("vpcharge: {err}");
            err.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
