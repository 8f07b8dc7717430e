//! Batch pipeline behind the `bayes-tca` binary.

use std::fmt;
use std::path::{Path, PathBuf};

use bayes_tca::TcaError;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

mod commands;
mod manifest;

pub use commands::{CostReport, FitConfig, FitSummary, RankReport, ScenarioCost};
pub use manifest::{derive_seed, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "bayes-tca", version, about = "Bayesian transaction cost analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Manifest seed; every random stream is derived from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute benchmarks from executions and tape, filter, and correlate.
    Benchmarks {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        executions: PathBuf,
        #[arg(long)]
        tape: PathBuf,
    },
    /// Generate synthetic observations from known coefficients.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Benchmark used when no config is given.
        #[arg(long, default_value = "IS")]
        kind: String,
        /// Observations per algorithm when no config is given.
        #[arg(long, default_value_t = 2000)]
        n: usize,
    },
    /// Fit the generic or per-algorithm model by MCMC.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        observations: PathBuf,
        #[arg(long, value_enum, default_value_t = Stage::Generic)]
        stage: Stage,
        /// Output directory of a generic fit (required for per-algo).
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        chains: Option<usize>,
        /// Benchmark to fit when neither the config nor the data decide it.
        #[arg(long)]
        kind: Option<String>,
    },
    /// Posterior distribution of the expected cost for scenarios.
    Cost {
        #[command(flatten)]
        common: Common,
        /// Fit output directory; repeat for several benchmarks.
        #[arg(long = "fit-dir", required = true)]
        fit_dirs: Vec<PathBuf>,
        /// JSON list of {kind, x1, x2, x3, x4, algo_id}.
        #[arg(long)]
        scenario: PathBuf,
        /// Include every draw in the output.
        #[arg(long)]
        draws: bool,
    },
    /// Rank algorithms for one order.
    Rank {
        #[command(flatten)]
        common: Common,
        #[arg(long = "fit-dir", required = true)]
        fit_dirs: Vec<PathBuf>,
        /// Observations CSV giving each algorithm's order history.
        #[arg(long)]
        history: PathBuf,
        /// JSON object {x1, x2, x3, x4}.
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Benchmark correlation matrices per participation bucket.
    Correlations {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        observations: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Generic,
    PerAlgo,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Divergence(m) => write!(f, "sampler divergence: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<TcaError> for CliError {
    fn from(e: TcaError) -> Self {
        match e {
            TcaError::Config(_) | TcaError::SpecMismatch(_) => CliError::Config(e.to_string()),
            TcaError::DivergentChain { .. } => CliError::Divergence(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn read_json_config<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub(crate) fn open_data(path: &Path) -> CliResult<std::fs::File> {
    std::fs::File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Files written by one command, relative to its output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub out_dir: PathBuf,
    pub files: Vec<String>,
}

pub fn run(cli: Cli) -> CliResult<Outcome> {
    match cli.command {
        Command::Benchmarks { common, executions, tape } => commands::benchmarks(&common, &executions, &tape),
        Command::Simulate { common, kind, n } => commands::simulate(&common, &kind, n),
        Command::Fit { common, observations, stage, stage1, chains, kind } => {
            commands::fit(&common, &observations, stage, stage1.as_deref(), chains, kind.as_deref())
        }
        Command::Cost { common, fit_dirs, scenario, draws } => commands::cost(&common, &fit_dirs, &scenario, draws),
        Command::Rank { common, fit_dirs, history, scenario } => commands::rank(&common, &fit_dirs, &history, &scenario),
        Command::Correlations { common, observations } => commands::correlations(&common, &observations),
    }
}

/// Parse command-line words (including the program name) and run.
pub fn run_args<I, T>(args: I) -> CliResult<Outcome>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Config(e.to_string()))?;
    run(cli)
}
