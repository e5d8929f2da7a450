//! `afragent`: data generation, training, evaluation and verification.

mod commands;
mod config;
mod eval;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Failure classes with stable exit codes.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
    Mismatch(String),
    Verification(String),
    Other(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Mismatch(_) => 4,
            CliError::Verification(_) => 5,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m)
            | CliError::Numeric(m)
            | CliError::Mismatch(m)
            | CliError::Verification(m)
            | CliError::Other(m) => m,
        }
    }
}

impl From<afr_core::Error> for CliError {
    fn from(e: afr_core::Error) -> Self {
        match e {
            afr_core::Error::Config(_) => CliError::Config(e.to_string()),
            afr_core::Error::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "afragent",
    version,
    about = "GUI agent with adaptive feature renormalization",
    after_help = "Any configuration key may be given as --key value (e.g. --fusion.low none, --seed 7).\n\
                  Precedence: flags, then --config file, then AFR_SEED for the seed, then defaults."
)]
pub struct Cli {
    /// Line-based `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic episode file.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy; writes train_log.csv, best.ckpt and last.ckpt under --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint (or a predictions file) on an episode file.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Score stored predictions instead of running a model.
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
        /// Also roll out with the model's own action history.
        #[arg(long)]
        closed_loop: bool,
        /// Permute the pixels of every screen before prediction.
        #[arg(long)]
        shuffle_pixels: bool,
        /// Write the decoded actions as JSONL.
        #[arg(long)]
        predictions_out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks for every block.
    Gradcheck {
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
    /// MAC cost report, low-res against high-res.
    Flops {
        /// Use the full-size dimensions instead of the configured model.
        #[arg(long)]
        full_size: bool,
        /// Prompt length used for the configured model.
        #[arg(long, default_value_t = 32)]
        text_tokens: usize,
        /// Decoder action positions.
        #[arg(long, default_value_t = 4)]
        action_tokens: usize,
    },
    /// Decode one action for a screen.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Binary PPM (P6) screenshot.
        #[arg(long)]
        screen: PathBuf,
        #[arg(long)]
        goal: String,
        /// Previous actions separated by `;`, e.g. "click b10 b20; scroll down".
        #[arg(long, default_value = "")]
        history: String,
    },
    /// Compare fusion strategies on a generated dataset.
    Ablation {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        train_per_subset: Option<usize>,
        #[arg(long)]
        test_per_subset: Option<usize>,
        /// Comma-separated model seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(args: Vec<String>) -> Result<(), CliError> {
    let (rest, overrides) = config::split_overrides(args)?;
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) if e.use_stderr() => return Err(CliError::Config(e.to_string())),
        Err(e) => {
            print!("{e}");
            return Ok(());
        }
    };
    commands::dispatch(cli, &overrides)
}
