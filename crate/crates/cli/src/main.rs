//! `fdp`: reproducible experiment harness for factorized diffusion policies.
//!
//! Exit codes: 0 success, 2 config error, 3 missing/corrupt dependency,
//! 4 numeric abort.

mod artifacts;
mod config;
mod ops;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fdp_core::{Error, Result};

const CSV_DOC: &str = "Result CSV columns: method,priority,scale,perturbation,demos,seed,success_rate,episodes";

#[derive(Parser)]
#[command(name = "fdp", version, about = "Factorized diffusion policy experiments", after_help = CSV_DOC)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate expert demonstration datasets for every (demos, seed) cell.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to a single seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train models for every (method, priority, demos, seed) cell.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        priority: Option<String>,
    },
    /// Evaluate trained models across the configured perturbations.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        priority: Option<String>,
    },
    /// Train on the analytic mixture fixture and compare scores with the
    /// closed-form oracle.
    ScoreCheck {
        #[arg(long)]
        out: PathBuf,
        /// Composition mode: "output" or "blockwise".
        #[arg(long, default_value = "output")]
        mode: String,
    },
    /// Render Markdown tables and SVG plots from completed eval cells.
    Report {
        #[arg(long)]
        out: PathBuf,
        /// Combine rows even if their env-config hashes differ.
        #[arg(long)]
        force: bool,
    },
    /// Full cross-product pipeline: data, training, evaluation, aggregation.
    /// Resumes from completed cells; FDP_THREADS caps the worker pool.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { config, out, seed } => {
            let mut loaded = ops::load_config(&config)?;
            ops::apply_overrides(&mut loaded.cfg, None, seed, None)?;
            ops::gen_data(&loaded.cfg, &artifacts::Paths::new(&out)?)
        }
        Cmd::Train { config, out, method, seed, priority } => {
            let mut loaded = ops::load_config(&config)?;
            ops::apply_overrides(&mut loaded.cfg, method.as_deref(), seed, priority.as_deref())?;
            ops::train(&loaded, &artifacts::Paths::new(&out)?)
        }
        Cmd::Eval { config, out, method, seed, priority } => {
            let mut loaded = ops::load_config(&config)?;
            ops::apply_overrides(&mut loaded.cfg, method.as_deref(), seed, priority.as_deref())?;
            ops::eval(&loaded, &artifacts::Paths::new(&out)?)
        }
        Cmd::ScoreCheck { out, mode } => ops::score_check_cmd(&artifacts::Paths::new(&out)?, &mode),
        Cmd::Report { out, force } => ops::report(&artifacts::Paths::new(&out)?, force),
        Cmd::Sweep { config, out } => {
            let loaded = ops::load_config(&config)?;
            ops::sweep(&loaded, &artifacts::Paths::new(&out)?)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingDependency(_) | Error::Io(_) | Error::Corrupt(_) => 3,
        Error::NumericDomain(_) | Error::NonFiniteLoss { .. } | Error::DegenerateStep { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
