use thiserror::Error;

/// Errors produced by the TCA library.
#[derive(Debug, Error)]
pub enum TcaError {
    #[error("fill list is empty")]
    EmptyFills,
    #[error("invalid price: {0}")]
    InvalidPrice(f64),
    #[error("no tape data for {0}")]
    NoTapeData(String),
    #[error("bucket {lo}-{hi}% has {n} complete orders, need at least 3")]
    BucketTooSmall { lo: f64, hi: f64, n: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid covariate {name} = {value}")]
    InvalidCovariate { name: &'static str, value: f64 },
    #[error("coefficient/prior shape mismatch: {0}")]
    SpecMismatch(String),
    #[error("need at least {needed} posterior draws, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("chain {chain} diverged: {sweeps} consecutive sweeps without a finite log posterior")]
    DivergentChain { chain: usize, sweeps: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("distribution is degenerate after regularization")]
    DegenerateDistribution,
    #[error("cannot standardize scores across {0} algorithm(s)")]
    CannotStandardize(usize),
    #[error("algorithm {algo} has {n} historical observations, need at least {needed}")]
    InsufficientHistory { algo: String, n: usize, needed: usize },
    #[error("malformed data: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = TcaError> = std::result::Result<T, E>;
