mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Graph residual flows for small molecular graphs.
#[derive(Debug, Parser)]
#[command(name = "grf", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// JSON run file with optional `profile`, `model`, `train` and `inversion` keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice; defaults to the config's `train.rng_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for parallel sample evaluation.
    #[arg(long)]
    pub threads: Option<usize>,
    /// JSON object mapping element symbol to maximum valence.
    #[arg(long)]
    pub valence_table: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a SMILES file.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Trainer checkpoint to resume from.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Overrides the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Draw molecules from the temperature-scaled prior.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0.65)]
        tx: f64,
        #[arg(long, default_value_t = 0.69)]
        ta: f64,
        /// Resample prior draws beyond two temperatures.
        #[arg(long)]
        truncate: bool,
        /// Training set, for novelty.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Encode and decode molecules at several fixed-point iteration counts.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,5,10,20,30,50,100")]
        iterations: Vec<usize>,
        /// Number of molecules, taken from the start of the dataset.
        #[arg(long, default_value_t = 1000)]
        count: usize,
    },
    /// Per-molecule log-likelihood traces.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Dense Jacobian log-determinants instead of the series estimate.
        #[arg(long)]
        exact: bool,
    },
    /// Decode a grid on the principal plane around a query molecule.
    LatentGrid {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 5)]
        size: usize,
        #[arg(long, default_value_t = 0.5)]
        step: f64,
    },
    /// Randomised checks of the contraction and estimator guarantees.
    Selfcheck {
        #[command(flatten)]
        common: Common,
        /// Instances for the norm, spectrum and Lipschitz suites.
        #[arg(long, default_value_t = 10_000)]
        instances: usize,
        #[arg(long, hide = true)]
        inject_over_budget: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
