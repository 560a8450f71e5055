//! `hhsplit`: generate synthetic FFN layers, profile heavy hitters, split,
//! compress, evaluate and benchmark.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
//! or measurement error. Diagnostics go to standard error; results are JSON
//! written to `--out` or standard output.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hhsplit::compress::{CompressionMode, CompressionPlan};

/// Heavy-hitter-aware FFN compression toolkit.
#[derive(Debug, Parser)]
#[command(name = "hhsplit", version, about)]
struct Cli {
    /// Worker threads for internal parallelism. Defaults to all cores,
    /// except `bench`, which defaults to one.
    #[arg(long, global = true, env = "HH_SPLIT_THREADS")]
    threads: Option<usize>,

    /// Write the JSON (or CSV) result here instead of standard output.
    #[arg(long, global = true)]
    out: Option<std::path::PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dense model with planted heavy hitters.
    GenModel(commands::GenModelArgs),
    /// Generate seeded Gaussian calibration batches.
    GenCalib(commands::GenCalibArgs),
    /// Accumulate per-neuron activation statistics over calibration data.
    Profile(commands::ProfileArgs),
    /// Split every layer into heavy-hitter and tail parts.
    Split(commands::SplitArgs),
    /// Compress the tail (low-rank) or both parts (mixed-precision).
    Compress(commands::CompressArgs),
    /// Measure forward error of a split or compressed model.
    Eval(commands::EvalArgs),
    /// Time dense and split forward passes.
    Bench(commands::BenchArgs),
    /// Closed-form parameter and FLOP counts.
    Params(commands::ParamsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Lowrank,
    Quant,
}

impl From<Mode> for CompressionMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Lowrank => CompressionMode::Lowrank,
            Mode::Quant => CompressionMode::Quant,
        }
    }
}

/// Per-part compression settings, everything except the heavy-hitter fraction.
#[derive(Debug, Clone, Args, Serialize)]
struct TailArgs {
    /// Compression mode.
    #[arg(long, value_enum, default_value_t = Mode::Lowrank)]
    mode: Mode,
    /// Tail rank as a fraction of min(d, tail neurons) (default 10%).
    #[arg(long, default_value_t = 0.10)]
    rank_frac: f64,
    /// Bits for heavy-hitter weights in quant mode.
    #[arg(long, default_value_t = 8)]
    hh_bits: u8,
    /// Bits for tail weights in quant mode.
    #[arg(long, default_value_t = 3)]
    tail_bits: u8,
    /// Quantization group size (default 128).
    #[arg(long, default_value_t = 128)]
    group_size: usize,
}

impl TailArgs {
    fn plan(&self, keep_frac: f64) -> Result<CompressionPlan, Failure> {
        let plan = CompressionPlan {
            mode: self.mode.into(),
            keep_frac,
            rank_frac: self.rank_frac,
            hh_bits: self.hh_bits,
            tail_bits: self.tail_bits,
            group_size: self.group_size,
        };
        plan.validate().map_err(|e| Failure::usage(e.to_string()))?;
        Ok(plan)
    }
}

/// Full compression plan.
#[derive(Debug, Clone, Args, Serialize)]
struct PlanArgs {
    /// Fraction of neurons per layer kept as heavy hitters (default: top 25%).
    #[arg(long, default_value_t = 0.25)]
    keep_frac: f64,
    #[command(flatten)]
    #[serde(flatten)]
    tail: TailArgs,
}

impl PlanArgs {
    fn plan(&self) -> Result<CompressionPlan, Failure> {
        self.tail.plan(self.keep_frac)
    }
}

/// A failed run: exit code plus message for standard error.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: 1,
            msg: msg.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self {
            code: 2,
            msg: msg.into(),
        }
    }

    /// Prefixes `context` to a library error and picks its exit code.
    pub fn from_lib(context: &str, e: hhsplit::Error) -> Self {
        use hhsplit::Error as E;
        let code = match e {
            E::Numeric(_) | E::Measurement(_) => 3,
            _ => 2,
        };
        let msg = if context.is_empty() {
            e.to_string()
        } else {
            format!("{context}: {e}")
        };
        Self { code, msg }
    }
}

impl From<hhsplit::Error> for Failure {
    fn from(e: hhsplit::Error) -> Self {
        Failure::from_lib("", e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
