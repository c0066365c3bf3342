//! `faqd` command-line driver.
//!
//! Exit codes: 0 success or verification pass, 1 usage or configuration
//! error, 2 runtime error, 3 verification failure.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{ModeArg, Objective, QuantArg};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_VERIFY_FAILED: i32 = 3;

/// Bad flags, config keys or missing inputs: reported with exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "faqd", version, about = "Quantized knowledge distillation with feature-affinity losses")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a float teacher network on labelled data
    TrainTeacher(TrainTeacherArgs),
    /// Distil a float teacher checkpoint into a quantized student
    Distill(DistillArgs),
    /// Time the exact and sketched affinity losses across map sizes
    BenchFfa(BenchArgs),
    /// Run one verification suite (jl, unbiased, tail, scaling, argmin)
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML run configuration
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing [config: output_dir]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Training seed [config: seed]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of epochs [config: train.epochs]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size [config: train.batch_size]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Learning rate [config: train.lr]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Cap on batches per epoch [config: train.max_batches_per_epoch]
    #[arg(long)]
    pub max_batches: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainTeacherArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Network name, resnet-tiny-8 or resnet-tiny-20 [config: teacher.name]
    #[arg(long)]
    pub net: Option<String>,
    /// Teacher weight bits; only 32 is accepted [config: teacher.weight_bits]
    #[arg(long)]
    pub bits: Option<u32>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Teacher checkpoint [config: teacher.checkpoint; default OUT/teacher.ckpt]
    #[arg(long, value_name = "FILE")]
    pub teacher: Option<PathBuf>,
    /// Float student checkpoint for fine-tuning [config: student.checkpoint]
    #[arg(long, value_name = "FILE")]
    pub student: Option<PathBuf>,
    /// Student weight bits: 1, 2, 4 or 32 [config: student.weight_bits]
    #[arg(long)]
    pub bits: Option<u32>,
    /// Student activation bits: 1, 2, 4 or 32 [config: student.act_bits]
    #[arg(long)]
    pub act_bits: Option<u32>,
    /// Quantization from scratch or from a float student [config: train.mode]
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Training objective [config: loss.objective]
    #[arg(long, value_enum)]
    pub loss: Option<Objective>,
    /// Sketch size for the affinity loss, 0 for exact [config: train.ffa_k]
    #[arg(long)]
    pub ffa_k: Option<usize>,
    /// Weight projection scheme [config: train.quant_mode]
    #[arg(long, value_enum)]
    pub quant_mode: Option<QuantArg>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Smallest map side
    #[arg(long, default_value_t = 8)]
    pub hmin: usize,
    /// Largest map side (sides double from hmin)
    #[arg(long, default_value_t = 128)]
    pub hmax: usize,
    /// Channels of both maps
    #[arg(long, default_value_t = 16)]
    pub c: usize,
    /// Sketch columns
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Timing samples per size (at least 5)
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report directory
    #[arg(long, value_name = "DIR", default_value = "runs/bench")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Suite name
    pub suite: String,
    /// Vectors (jl), pixels (unbiased, tail) or matrix size (argmin)
    #[arg(long)]
    pub n: Option<usize>,
    /// Channels (unbiased, tail, scaling)
    #[arg(long)]
    pub c: Option<usize>,
    /// Ambient dimension (jl)
    #[arg(long)]
    pub d: Option<usize>,
    /// Distortion (jl) or tail threshold (tail; default from the k=1 deviations)
    #[arg(long)]
    pub eps: Option<f64>,
    /// Single-probe draws (unbiased)
    #[arg(long)]
    pub samples: Option<usize>,
    /// Trials (jl) or trials per k (tail)
    #[arg(long)]
    pub trials: Option<usize>,
    /// Comma-separated sketch sizes (tail, argmin)
    #[arg(long, value_delimiter = ',')]
    pub k_list: Option<Vec<usize>>,
    /// Sketch columns (scaling)
    #[arg(long)]
    pub k: Option<usize>,
    /// Smallest map side (scaling)
    #[arg(long)]
    pub hmin: Option<usize>,
    /// Largest map side (scaling)
    #[arg(long)]
    pub hmax: Option<usize>,
    /// Timing samples per size (scaling)
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report directory
    #[arg(long, value_name = "DIR", default_value = "runs/verify")]
    pub out: PathBuf,
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(commands::Outcome::Success) => EXIT_OK,
        Ok(commands::Outcome::VerifyFailed) => EXIT_VERIFY_FAILED,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(faqd_core::Error::Config(_)) = cause.downcast_ref::<faqd_core::Error>() {
            return EXIT_USAGE;
        }
    }
    EXIT_RUNTIME
}
