//! Synthetic benchmark data from known coefficients, and a recovery report
//! comparing a fitted posterior against that truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::benchmark::{BenchmarkKind, BenchmarkObservation, FilterConfig};
use crate::error::{Result, TcaError};
use crate::model::{coefficient_names, link, CoefficientVector, Covariates};
use crate::sampler::PosteriorSamples;
use crate::stats;

/// Log-uniform sampling ranges `[lo, hi]` for each covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariateRanges {
    pub x1: [f64; 2],
    pub x2: [f64; 2],
    pub x3: [f64; 2],
    pub x4: [f64; 2],
}

impl Default for CovariateRanges {
    fn default() -> Self {
        Self { x1: [0.001, 0.2], x2: [1.0, 40.0], x3: [10.0, 80.0], x4: [2.0, 50.0] }
    }
}

impl CovariateRanges {
    fn all(&self) -> [(&'static str, [f64; 2]); 4] {
        [("x1", self.x1), ("x2", self.x2), ("x3", self.x3), ("x4", self.x4)]
    }

    /// Ranges must be positive, ordered, and inside the filter bounds.
    pub fn validate(&self, filters: &FilterConfig) -> Result<()> {
        for (name, [lo, hi]) in self.all() {
            if !(lo > 0.0) || !(hi >= lo) || !hi.is_finite() {
                return Err(TcaError::Config(format!("{name} range [{lo}, {hi}] must be positive and ordered")));
            }
        }
        let inside = |[lo, hi]: [f64; 2], min: f64, max: f64| lo >= min && hi <= max;
        if !inside(self.x1, filters.x1_min, filters.x1_max) || !inside(self.x2, filters.x2_min, filters.x2_max) {
            return Err(TcaError::Config("synthetic covariate ranges fall outside the filter bounds".into()));
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Covariates {
        let mut one = |[lo, hi]: [f64; 2]| {
            if hi == lo {
                lo
            } else {
                (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp().clamp(lo, hi)
            }
        };
        Covariates::new(one(self.x1), one(self.x2), one(self.x3), one(self.x4))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgoTruth {
    pub algo_id: String,
    pub coefficients: CoefficientVector,
    /// Overrides `SynthConfig::n_per_algo`.
    #[serde(default)]
    pub n: Option<usize>,
    /// Overrides `SynthConfig::covariates`.
    #[serde(default)]
    pub covariates: Option<CovariateRanges>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub kind: BenchmarkKind,
    pub algos: Vec<AlgoTruth>,
    pub n_per_algo: usize,
    #[serde(default)]
    pub covariates: CovariateRanges,
    #[serde(default)]
    pub seed: u64,
}

impl SynthConfig {
    /// One algorithm with the reference US coefficients of `kind`.
    pub fn reference(kind: BenchmarkKind, n: usize, seed: u64) -> Self {
        Self {
            kind,
            algos: vec![AlgoTruth { algo_id: "ALGO1".into(), coefficients: CoefficientVector::reference_us(kind), n: None, covariates: None }],
            n_per_algo: n,
            covariates: CovariateRanges::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.algos.is_empty() {
            return Err(TcaError::Config("synthetic config lists no algorithms".into()));
        }
        let filters = FilterConfig::default();
        self.covariates.validate(&filters)?;
        for a in &self.algos {
            if !a.coefficients.kind_matches(self.kind) {
                return Err(TcaError::SpecMismatch(format!("truth for '{}' does not fit {}", a.algo_id, self.kind)));
            }
            if let Some(c) = &a.covariates {
                c.validate(&filters)?;
            }
        }
        Ok(())
    }
}

/// Draw observations algorithm by algorithm. Each algorithm uses its own
/// stream of the config seed, so adding an algorithm leaves the others
/// unchanged.
pub fn generate(config: &SynthConfig) -> Result<Vec<BenchmarkObservation>> {
    config.validate()?;
    let mut out = Vec::new();
    for (i, a) in config.algos.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64);
        let ranges = a.covariates.unwrap_or(config.covariates);
        for row in 0..a.n.unwrap_or(config.n_per_algo) {
            let x = ranges.draw(&mut rng);
            let y = link(&a.coefficients, &x, config.kind)?.sample_with(&mut rng);
            out.push(BenchmarkObservation {
                y,
                kind: config.kind,
                x1: x.x1,
                x2: x.x2,
                x3: x.x3,
                x4: x.x4,
                algo_id: a.algo_id.clone(),
                order_id: Some(format!("{}-{row:06}", a.algo_id)),
                duration_ms: None,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryEntry {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    pub std: f64,
    pub bias: f64,
    pub z: f64,
    pub lo95: f64,
    pub hi95: f64,
    pub covered: bool,
}

/// Compare `fitted` (standard coefficient layout for `kind`) with `truth`.
pub fn recovery_report(truth: &CoefficientVector, fitted: &PosteriorSamples, kind: BenchmarkKind) -> Result<Vec<RecoveryEntry>> {
    if !truth.kind_matches(kind) {
        return Err(TcaError::SpecMismatch(format!("truth does not fit {kind}")));
    }
    if fitted.n_draws() == 0 {
        return Err(TcaError::InsufficientSamples { needed: 1, got: 0 });
    }
    coefficient_names(kind)
        .into_iter()
        .zip(truth.to_flat())
        .map(|(name, t)| {
            let col = fitted.column_by_name(&name).ok_or_else(|| TcaError::SpecMismatch(format!("posterior has no column '{name}'")))?;
            let (mean, std) = stats::mean_std(&col);
            let s = stats::sorted(&col);
            let (lo95, hi95) = (stats::quantile_sorted(&s, 0.025), stats::quantile_sorted(&s, 0.975));
            let bias = mean - t;
            let z = if std > 0.0 {
                bias / std
            } else if bias == 0.0 {
                0.0
            } else {
                bias.signum() * f64::INFINITY
            };
            Ok(RecoveryEntry { name, truth: t, mean, std, bias, z, lo95, hi95, covered: lo95 <= t && t <= hi95 })
        })
        .collect()
}
