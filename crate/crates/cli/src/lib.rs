//! `nes2net`: profile, gradient-check, train, score, evaluate and average back-ends.

mod commands;

pub use commands::{eval_report, run};

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use nes2net_core::Error;

#[derive(Parser)]
#[command(name = "nes2net", version, about = "Nes2Net / Res2Net back-ends on synthetic features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Format {
    Table,
    Tsv,
}

#[derive(Subcommand)]
pub enum Command {
    /// Parameter and MAC counts per layer.
    Profile {
        config: PathBuf,
        /// Frames per utterance [default: the config's eval.frames, else 200].
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
        /// Also run an instrumented forward pass and fail on any count mismatch.
        #[arg(long)]
        verify: bool,
    },
    /// Compare analytic gradients with central differences (f64).
    Gradcheck {
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        /// Refuse models with more trainable parameters than this.
        #[arg(long, default_value_t = 100_000)]
        max_params: usize,
        /// Corrupt one op's backward, as `op` or `op:factor`.
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
    /// Train on synthetic data; writes train.log, top-K checkpoints and best.ckpt.
    Train {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a synthetic split with a checkpoint.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "eval")]
        split: String,
        /// Seed of the run that produced the data.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// EER, per-attack EER, minDCF and CLLR of a score file.
    Eval {
        scores: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        p_target: f64,
        #[arg(long, default_value_t = 1.0)]
        c_miss: f64,
        #[arg(long, default_value_t = 10.0)]
        c_fa: f64,
    },
    /// Element-wise average of checkpoints.
    Avg {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure with its exit status.
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { code: if e.is_usage() { 2 } else { 1 }, message: e.to_string() }
    }
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }

    pub fn compute(message: impl Into<String>) -> Self {
        Failure { code: 1, message: message.into() }
    }
}

/// Sizes the global thread pool from `N2N_THREADS`.
pub fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("N2N_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::usage(format!("N2N_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::compute(format!("thread pool: {e}")))
}

