//! `cct`: critical clearing time, sensitivities, sweeps, stability-region
//! grids and oracle checks from a JSON configuration.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug)]
pub enum Failure {
    Compute(String),
    Config(String),
    Validation(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Compute(_) => 1,
            Failure::Config(_) => 2,
            Failure::Validation(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Compute(m) | Failure::Config(m) | Failure::Validation(m) => m,
        }
    }
}

#[derive(Parser)]
#[command(name = "cct", version, about = "Critical clearing time analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    /// Attach oracle comparisons (cct, sens).
    #[arg(long, global = true)]
    verify: bool,

    /// Tolerance overrides as key=value, repeatable or comma separated.
    #[arg(long = "tol", global = true)]
    tol: Vec<String>,

    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Critical clearing time and instability mode.
    Cct,
    /// CCT sensitivity for the configured parameters.
    Sens,
    /// CCT over a parameter range.
    Sweep,
    /// Stability-region grid of the post-fault system.
    SrGrid,
    /// Analytic results against finite-difference and brute-force oracles.
    Validate,
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Failure::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Config(e.to_string()))?;
    }
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Config("--config <path> is required".into()))?;
    let loaded = config::load(path, &cli.tol).map_err(Failure::Config)?;
    match cli.command {
        Command::Cct => commands::cmd_cct(&loaded, &cli.out, cli.verify),
        Command::Sens => commands::cmd_sens(&loaded, &cli.out, cli.verify),
        Command::Sweep => commands::cmd_sweep(&loaded, &cli.out),
        Command::SrGrid => commands::cmd_sr_grid(&loaded, &cli.out),
        Command::Validate => commands::cmd_validate(&loaded, &cli.out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
