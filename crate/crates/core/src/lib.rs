//! Bayesian transaction cost analysis: execution benchmarks, asymmetric
//! Laplace regression fitted by Metropolis-Hastings, cost posteriors and
//! algorithm ranking.

pub mod ald;
pub mod benchmark;
pub mod cost;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod model;
pub mod ranking;
pub mod sampler;
pub mod stats;
pub mod synth;

pub use ald::{kappa_from_r, AldParams};
pub use benchmark::{
    apply_filters, compute_observations, BenchmarkKind, BenchmarkObservation, CorrelationMatrix, Cutoffs, ExecutionRecord,
    Fill, FilterConfig, Side, TapeTrade,
};
pub use cost::{cost_posterior, sample_cost, CostPosterior, CostSummary};
pub use error::{Result, TcaError};
pub use model::{link, CoefficientVector, Covariates, ModelSpec, Pooling, PriorSpec};
pub use ranking::{algo_wheel, fit_profile, rank_algorithms, HistoricalProfile, RankingWeights, ScoreCard};
pub use sampler::{run_mh, ChainConfig, PosteriorSamples};
pub use synth::{generate, recovery_report, SynthConfig};
