//! `edcnn`: factorize filters, compile dense networks into pooled eDCNNs,
//! verify compiled networks and run the toy learning experiments.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use edcnn::nets::ExperimentName;
use serde::Serialize;

/// Process exit statuses.
pub mod exit {
    pub const OK: u8 = 0;
    pub const VERIFICATION: u8 = 1;
    pub const INVALID_INPUT: u8 = 2;
    pub const NUMERIC: u8 = 3;
    pub const USAGE: u8 = 64;
}

#[derive(Debug, Parser, Clone)]
#[command(name = "edcnn", version, about = "Zero-padded convolutional network toolkit")]
pub struct Cli {
    /// Print machine-readable JSON reports on stdout.
    #[arg(long, global = true)]
    pub json: bool,

    /// Seed for every random draw; a fresh seed is drawn and recorded when omitted.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Allow overwriting existing output files.
    #[arg(long, global = true)]
    pub force: bool,

    /// Where to write the run manifest (defaults next to the main output).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Clone)]
pub enum Command {
    /// Factor a long filter into a cascade of short ones.
    Factorize(FactorizeArgs),
    /// Compile a dense ReLU network into a pooled eDCNN.
    Compile(CompileArgs),
    /// Check a compiled network against its dense source.
    Verify(VerifyArgs),
    /// Run one of the toy learning experiments.
    Experiment(ExperimentArgs),
    /// Write a random dense ReLU network.
    InitDense(InitDenseArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args, Clone, Serialize)]
pub struct FactorizeArgs {
    /// JSON array of coefficients `u_0 … u_S` (or an object with a `coeffs` field).
    #[arg(long)]
    pub input: PathBuf,
    /// Filter length parameter: each factor has s + 1 taps.
    #[arg(long)]
    pub s: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Largest accepted relative reconstruction error.
    #[arg(long, default_value_t = 1e-8)]
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasModeArg {
    Tight,
    Paper,
}

#[derive(Debug, Args, Clone, Serialize)]
pub struct CompileArgs {
    /// Dense network JSON.
    #[arg(long)]
    pub dense: PathBuf,
    #[arg(long)]
    pub s: usize,
    /// Inputs are assumed to lie in [-bound, bound]^d.
    #[arg(long, default_value_t = 1.0)]
    pub bound: f64,
    #[arg(long, value_enum, default_value_t = BiasModeArg::Tight)]
    pub mode: BiasModeArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Random probes for the inline equivalence check.
    #[arg(long, default_value_t = 100)]
    pub probes: usize,
}

#[derive(Debug, Args, Clone, Serialize)]
pub struct VerifyArgs {
    #[arg(long)]
    pub compiled: PathBuf,
    #[arg(long)]
    pub dense: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub probes: usize,
    /// Also check translation invariance for every admissible shift.
    #[arg(long)]
    pub shift_test: bool,
    /// Largest accepted relative gap.
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
}

#[derive(Debug, Args, Clone, Serialize)]
pub struct ExperimentArgs {
    /// fit_f1, fit_f2, fit_f3, f1m, f2m, learn_f1, learn_f2, learn_f3,
    /// consistency_f2 or consistency_f3.
    #[arg(long, value_parser = parse_experiment)]
    pub name: ExperimentName,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Training epochs; the learning-rate boundaries scale with it.
    #[arg(long, default_value_t = 2000)]
    pub epochs: usize,
    /// Only train these architectures (repeatable).
    #[arg(long = "arch")]
    pub architectures: Vec<String>,
    /// Override the training-set sizes (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub sizes: Vec<usize>,
    /// Clamp predictions to [-M, M] when computing test RMSE.
    #[arg(long)]
    pub truncation: Option<f64>,
    /// Record wall-clock seconds per row; without it the column is 0 and
    /// reruns are byte-identical.
    #[arg(long)]
    pub timing: bool,
    /// Also write every trained cell (with loss traces) as JSON here.
    #[arg(long)]
    pub cells: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Serialize)]
pub struct InitDenseArgs {
    #[arg(long)]
    pub input_dim: usize,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub widths: Vec<usize>,
    /// Biases are drawn uniformly from [-bias_scale, bias_scale].
    #[arg(long, default_value_t = 0.5)]
    pub bias_scale: f64,
    #[arg(long)]
    pub head: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone, Serialize)]
pub struct ReplayArgs {
    #[arg(long = "from")]
    pub from: PathBuf,
    /// Write outputs into this directory instead of the recorded paths.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn parse_experiment(raw: &str) -> Result<ExperimentName, String> {
    raw.parse::<ExperimentName>().map_err(|_| {
        let known: Vec<&str> = ExperimentName::ALL.iter().map(|n| n.as_str()).collect();
        format!("unknown experiment; expected one of {}", known.join(", "))
    })
}

/// A failed command: message for stderr plus exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<edcnn::Error> for Failure {
    fn from(e: edcnn::Error) -> Self {
        let code = match e {
            edcnn::Error::NumericFailure(_) => exit::NUMERIC,
            _ => exit::INVALID_INPUT,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new(exit::INVALID_INPUT, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::new(exit::INVALID_INPUT, e.to_string())
    }
}

fn configure_threads() {
    let Ok(raw) = std::env::var("EDCNN_THREADS") else {
        return;
    };
    match raw.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            // Fails only if a pool already exists, in which case it is kept.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        _ => eprintln!("warning: ignoring EDCNN_THREADS={raw:?}"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    configure_threads();
    match commands::run(&cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
