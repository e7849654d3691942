//! `occ`: batch pipeline commands and the review service.
//!
//! Exit status: 0 on success, 1 on input errors (including bad flags),
//! 2 when the model backend fails.

mod backend;
mod commands;
mod config;
mod server;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::BackendKind;

#[derive(Parser, Debug)]
#[command(name = "occ", version, about = "Candidate nodule false-positive reduction with a language-vision model")]
struct Cli {
    /// TOML config file (defaults to $OCC_CONFIG, then built-in defaults).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct BackendArgs {
    /// Model backend; overrides `backend.kind`.
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// Cassette to replay from.
    #[arg(long)]
    cassette: Option<PathBuf>,
    /// Record every exchange into this cassette.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Seed for the mock oracle and random slice selection.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct StrategyArgs {
    /// Ablation column: `all` or `no-<toggle>`.
    #[arg(long)]
    strategy: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a study bundle from loose volume, lobe and candidate files.
    Ingest {
        #[arg(long)]
        id: String,
        /// volume.json header (dims, spacing, dtype).
        #[arg(long)]
        header: PathBuf,
        /// Little-endian int16 voxels, x fastest.
        #[arg(long)]
        volume: PathBuf,
        /// One label byte per voxel.
        #[arg(long)]
        lobes: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, conflicts_with = "description_file")]
        description: Option<String>,
        #[arg(long)]
        description_file: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic studies.
    Phantom {
        /// Phantom spec JSON; writes one study into --out.
        #[arg(long, conflicts_with = "cohort", required_unless_present = "cohort")]
        spec: Option<PathBuf>,
        /// Write this many built-in cohort phantoms under --out.
        #[arg(long)]
        cohort: Option<usize>,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the baseline blob detector and store its candidates.
    Detect {
        /// A study directory or a directory of studies.
        path: PathBuf,
        #[arg(long)]
        hu_threshold: Option<i16>,
        #[arg(long)]
        min_volume: Option<f64>,
        #[arg(long)]
        max_volume: Option<f64>,
        #[arg(long)]
        connectivity: Option<u8>,
    },
    /// Write the prompt images and text for inspection.
    Render {
        path: PathBuf,
        /// Only this candidate (default: all).
        #[arg(long)]
        candidate: Option<String>,
        #[command(flatten)]
        strategy: StrategyArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run false-positive reduction and store the verdicts.
    Filter {
        path: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
        #[command(flatten)]
        strategy: StrategyArgs,
        /// Print verdicts as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Compute metrics against ground truth; writes metrics.json per study.
    Evaluate {
        path: PathBuf,
        /// Also write the aggregate report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep all seven ablation columns over a directory of studies.
    Ablate {
        path: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
        /// CSV destination (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Loss function checks.
    Losses {
        #[command(subcommand)]
        action: LossAction,
    },
    /// Start the REST service.
    Serve {
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        #[command(flatten)]
        backend: BackendArgs,
    },
}

#[derive(Subcommand, Debug)]
enum LossAction {
    /// Analytic vs finite-difference gradients.
    Selftest {
        #[arg(long, default_value_t = 200)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
