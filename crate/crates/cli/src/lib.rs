//! Command-line front end: data generation, training, cross-validation,
//! evaluation, CSV exports, configuration sweeps and self-checks.

pub mod checks;
pub mod config;
mod export;
mod run;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mstgcn::data::DataError;
use mstgcn::params::ParamError;
use mstgcn::train::TrainError;
use thiserror::Error;

pub use config::{ConfigError, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ParamError> for CliError {
    fn from(e: ParamError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::Divergence { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "mstgcn", version, about = "Multi-view spatial-temporal graph convolution for sleep staging")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset container.
    SynthData(SynthArgs),
    /// Train one model on every subject except the validation subjects.
    Train(TrainArgs),
    /// Subject-independent k-fold cross-validation.
    CrossValidate(CvArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Mean learned functional adjacency per sleep stage.
    ExportAdjacency(ExportArgs),
    /// Mean temporal and spatial attention weights.
    ExportAttention(ExportArgs),
    /// Grid over network configurations.
    Sweep(SweepArgs),
    /// Gradient checks and numerical oracles.
    SelfCheck,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 5)]
    pub subjects: usize,
    /// Epochs per subject.
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 3000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.5)]
    pub bias: f64,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated subjects; defaults to the checkpoint's held-out
    /// subjects, or every subject.
    #[arg(long)]
    pub subjects: Option<String>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub subjects: Option<String>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Comma-separated values of each swept key; unset keys keep the
    /// configured value.
    #[arg(long)]
    pub layers: Option<String>,
    /// Temporal convolution kernel sizes.
    #[arg(long)]
    pub kernels: Option<String>,
    #[arg(long)]
    pub cheb_k: Option<String>,
    #[arg(long)]
    pub lambda: Option<String>,
    /// Functional adjacency sources (learned, full, knn, pcc, plv, mi).
    #[arg(long)]
    pub fc_source: Option<String>,
    /// Hold these subjects out instead of cross-validating.
    #[arg(long)]
    pub test_subjects: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(short, long)]
    pub output: PathBuf,
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run() -> i32 {
    run_from(std::env::args_os())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthData(a) => run::synth_data(&a),
        Command::Train(a) => run::train(&a),
        Command::CrossValidate(a) => run::cross_validate(&a),
        Command::Eval(a) => run::eval(&a),
        Command::ExportAdjacency(a) => export::adjacency(&a),
        Command::ExportAttention(a) => export::attention(&a),
        Command::Sweep(a) => run::sweep(&a),
        Command::SelfCheck => self_check(),
    }
}

fn self_check() -> Result<()> {
    let outcomes = checks::all();
    for o in &outcomes {
        println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed > 0 {
        return Err(CliError::Numerical(format!("{failed} self-check suite(s) failed")));
    }
    println!("all {} suites passed", outcomes.len());
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
