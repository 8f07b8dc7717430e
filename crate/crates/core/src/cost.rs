//! Posterior distribution of the expected benchmark value for a given order:
//! each retained coefficient draw is mapped through the links and the ALD
//! mean `mu + sigma (1/kappa - kappa)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::benchmark::BenchmarkKind;
use crate::error::{Result, TcaError};
use crate::model::{link, Covariates};
use crate::sampler::PosteriorSamples;
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub mean: f64,
    pub std: f64,
    pub q05: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q95: f64,
}

impl CostSummary {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = stats::mean_std(values);
        let s = stats::sorted(values);
        let q = |p| stats::quantile_sorted(&s, p);
        Self { mean, std, q05: q(0.05), q25: q(0.25), q50: q(0.5), q75: q(0.75), q95: q(0.95) }
    }
}

/// One expected cost per retained draw, in draw order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostPosterior {
    pub values: Vec<f64>,
    pub summary: CostSummary,
}

impl CostPosterior {
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(TcaError::InvalidInput("cost posterior needs at least one value".into()));
        }
        let summary = CostSummary::of(&values);
        Ok(Self { values, summary })
    }
}

/// `samples` must be in the standard coefficient layout for `kind`.
pub fn cost_posterior(samples: &PosteriorSamples, kind: BenchmarkKind, x: &Covariates) -> Result<CostPosterior> {
    x.validate()?;
    let values = samples
        .coefficient_draws(kind)?
        .iter()
        .map(|c| link(c, x, kind).map(|p| p.mean()))
        .collect::<Result<Vec<f64>>>()?;
    CostPosterior::from_values(values)
}

/// One posterior realization, drawn uniformly from the stored values.
pub fn sample_cost(cost: &CostPosterior, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_cost_with(cost, &mut rng)
}

pub fn sample_cost_with<R: Rng + ?Sized>(cost: &CostPosterior, rng: &mut R) -> f64 {
    cost.values[rng.random_range(0..cost.values.len())]
}
