//! Block-wise random-walk Metropolis-Hastings with burn-in adaptation,
//! thinning, multi-chain diagnostics and posterior predictive draws.
//!
//! Each sweep proposes every block in turn with a Gaussian random walk
//! `theta_b' = theta_b + lambda_b * L_b * z`. During burn-in `lambda_b` is
//! tuned toward a 0.2-0.4 acceptance rate and `L_b` is re-estimated from the
//! chain's own burn-in draws; both are frozen for the retained phase.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmark::BenchmarkKind;
use crate::diagnostics;
use crate::error::{Result, TcaError};
use crate::model::{
    coefficient_names, link, CoefficientVector, Covariates, GenericPosterior, HierarchicalPosterior, ModelSpec, Pooling,
};
use crate::benchmark::BenchmarkObservation;

/// Unnormalized log density over a flat parameter vector.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Parameter blocks proposed jointly; together they cover `0..dim`.
    fn blocks(&self) -> Vec<Range<usize>> {
        vec![0..self.dim()]
    }

    fn param_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("theta{i}")).collect()
    }

    fn log_density(&self, theta: &[f64]) -> f64;

    /// Per-chain stateful evaluator. Targets with expensive likelihoods
    /// override this to reuse terms untouched by a block proposal.
    fn evaluator(&self) -> Box<dyn BlockEvaluator + '_> {
        Box::new(FullEvaluator { target: self })
    }
}

/// Chain-local evaluation state. `propose` is only called with a vector that
/// differs from the current state in `block`.
pub trait BlockEvaluator {
    fn reset(&mut self, theta: &[f64]) -> f64;
    fn propose(&mut self, theta: &[f64], block: usize) -> f64;
    fn accept(&mut self);
}

struct FullEvaluator<'a, T: ?Sized> {
    target: &'a T,
}

impl<T: LogDensity + ?Sized> BlockEvaluator for FullEvaluator<'_, T> {
    fn reset(&mut self, theta: &[f64]) -> f64 {
        self.target.log_density(theta)
    }

    fn propose(&mut self, theta: &[f64], _block: usize) -> f64 {
        self.target.log_density(theta)
    }

    fn accept(&mut self) {}
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub n_burn: usize,
    pub thinning: usize,
    pub n_chains: usize,
    /// Initial per-parameter proposal scales; `None` uses 0.05 throughout.
    pub step_scales: Option<Vec<f64>>,
    pub seed: u64,
    pub adapt_during_burn: bool,
}

impl Default for ChainConfig {
    /// Desk-scale settings.
    fn default() -> Self {
        Self { n_iter: 20_000, n_burn: 10_000, thinning: 5, n_chains: 4, step_scales: None, seed: 0, adapt_during_burn: true }
    }
}

impl ChainConfig {
    /// Long-run settings for calibration-grade fits.
    pub fn long_run() -> Self {
        Self { n_iter: 500_000, n_burn: 400_000, thinning: 20, ..Self::default() }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.n_burn >= self.n_iter {
            return Err(TcaError::Config(format!("n_burn ({}) must be below n_iter ({})", self.n_burn, self.n_iter)));
        }
        if self.thinning == 0 {
            return Err(TcaError::Config("thinning must be at least 1".into()));
        }
        if self.n_chains < 2 {
            return Err(TcaError::Config("at least 2 chains are required for diagnostics".into()));
        }
        if self.retained_per_chain() == 0 {
            return Err(TcaError::Config("configuration retains no draws".into()));
        }
        if let Some(s) = &self.step_scales {
            if s.len() != dim || s.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(TcaError::Config(format!("need {dim} positive step scales")));
            }
        }
        Ok(())
    }

    pub fn retained_per_chain(&self) -> usize {
        (self.n_iter - self.n_burn) / self.thinning
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSummary {
    pub name: String,
    #[serde(deserialize_with = "crate::stats::nan_from_null")]
    pub mean: f64,
    #[serde(deserialize_with = "crate::stats::nan_from_null")]
    pub std: f64,
    #[serde(deserialize_with = "crate::stats::nan_from_null")]
    pub rhat: f64,
    #[serde(deserialize_with = "crate::stats::nan_from_null")]
    pub ess: f64,
}

/// Retained draws (rows) with per-parameter diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub names: Vec<String>,
    pub draws: Vec<Vec<f64>>,
    pub chain: Vec<usize>,
    pub acceptance_rate: f64,
    pub rhat: Vec<f64>,
    pub ess: Vec<f64>,
    pub summary: Vec<CoefficientSummary>,
}

impl PosteriorSamples {
    /// Build from raw rows, computing summaries and diagnostics. Rows of one
    /// chain must be contiguous and in draw order.
    pub fn from_draws(names: Vec<String>, draws: Vec<Vec<f64>>, chain: Vec<usize>) -> Self {
        let mut s = Self { names, draws, chain, acceptance_rate: f64::NAN, rhat: vec![], ess: vec![], summary: vec![] };
        s.recompute();
        s
    }

    fn recompute(&mut self) {
        let n_chains = self.chain.iter().max().map_or(0, |m| m + 1);
        let mut rhat = Vec::with_capacity(self.names.len());
        let mut ess = Vec::with_capacity(self.names.len());
        let mut summary = Vec::with_capacity(self.names.len());
        for j in 0..self.names.len() {
            let mut per_chain = vec![Vec::new(); n_chains];
            for (row, &c) in self.draws.iter().zip(&self.chain) {
                per_chain[c].push(row[j]);
            }
            per_chain.retain(|c| !c.is_empty());
            let r = diagnostics::split_rhat(&per_chain);
            let e = diagnostics::ess(&per_chain);
            let (mean, std) = crate::stats::mean_std(&self.column(j));
            rhat.push(r);
            ess.push(e);
            summary.push(CoefficientSummary { name: self.names[j].clone(), mean, std, rhat: r, ess: e });
        }
        self.rhat = rhat;
        self.ess = ess;
        self.summary = summary;
    }

    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.draws.iter().map(|r| r[j]).collect()
    }

    pub fn column_by_name(&self, name: &str) -> Option<Vec<f64>> {
        self.names.iter().position(|n| n == name).map(|j| self.column(j))
    }

    pub fn mean_of(&self, name: &str) -> Option<f64> {
        self.summary.iter().find(|s| s.name == name).map(|s| s.mean)
    }

    /// Algorithms carrying their own coefficients (`name[algo]` columns).
    pub fn algos(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for n in &self.names {
            if let Some(start) = n.find('[') {
                let a = n[start + 1..n.len() - 1].to_string();
                if !out.contains(&a) {
                    out.push(a);
                }
            }
        }
        out
    }

    /// Standard coefficient layout for `algo`: algorithm-specific columns
    /// where present, shared columns otherwise.
    pub fn coefficients_for(&self, algo: Option<&str>, kind: BenchmarkKind) -> Result<PosteriorSamples> {
        let names = coefficient_names(kind);
        let idx = names
            .iter()
            .map(|n| {
                algo.and_then(|a| self.names.iter().position(|m| *m == format!("{n}[{a}]")))
                    .or_else(|| self.names.iter().position(|m| m == n))
                    .ok_or_else(|| {
                        TcaError::SpecMismatch(match algo {
                            Some(a) => format!("posterior has no '{n}' column for algorithm '{a}'"),
                            None => format!("posterior has no '{n}' column"),
                        })
                    })
            })
            .collect::<Result<Vec<usize>>>()?;
        let draws = self.draws.iter().map(|r| idx.iter().map(|&j| r[j]).collect()).collect();
        let pick = |v: &[f64]| idx.iter().map(|&j| v.get(j).copied().unwrap_or(f64::NAN)).collect::<Vec<_>>();
        let summary = idx
            .iter()
            .zip(&names)
            .map(|(&j, n)| {
                let mut s = self.summary[j].clone();
                s.name = n.clone();
                s
            })
            .collect();
        Ok(PosteriorSamples {
            names,
            draws,
            chain: self.chain.clone(),
            acceptance_rate: self.acceptance_rate,
            rhat: pick(&self.rhat),
            ess: pick(&self.ess),
            summary,
        })
    }

    pub fn coefficient_draws(&self, kind: BenchmarkKind) -> Result<Vec<CoefficientVector>> {
        self.draws.iter().map(|r| CoefficientVector::from_flat(kind, r)).collect()
    }
}

/// Multiplicative proposal-scale update from windowed acceptance rates.
/// Rates inside `[0.2, 0.4]` leave the scale unchanged.
pub fn adapt_steps(scales: &[f64], acceptance: &[f64]) -> Vec<f64> {
    const LOW: f64 = 0.2;
    const HIGH: f64 = 0.4;
    const TARGET: f64 = 0.3;
    scales
        .iter()
        .zip(acceptance)
        .map(|(&s, &a)| if (LOW..=HIGH).contains(&a) { s } else { s * (2.5 * (a - TARGET)).exp() })
        .collect()
}

const ADAPT_WINDOW: usize = 50;

struct BlockProposal {
    range: Range<usize>,
    /// Lower-triangular factor, row-major `d x d`.
    chol: Vec<f64>,
    lambda: f64,
}

impl BlockProposal {
    fn dim(&self) -> usize {
        self.range.len()
    }

    fn perturb(&self, theta: &mut [f64], rng: &mut ChaCha8Rng, z: &mut Vec<f64>) {
        let d = self.dim();
        z.clear();
        z.extend((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        for i in 0..d {
            let step: f64 = (0..=i).map(|k| self.chol[i * d + k] * z[k]).sum();
            theta[self.range.start + i] += self.lambda * step;
        }
    }

    /// Re-estimate the shape from burn-in draws; keeps the old shape when the
    /// empirical covariance is not positive definite.
    fn learn_shape(&mut self, history: &[Vec<f64>]) {
        let d = self.dim();
        let n = history.len();
        if n < 10 * d {
            return;
        }
        let r = self.range.clone();
        let mean: Vec<f64> = (0..d).map(|i| history.iter().map(|h| h[r.start + i]).sum::<f64>() / n as f64).collect();
        let mut cov = vec![0.0; d * d];
        for h in history {
            for i in 0..d {
                let di = h[r.start + i] - mean[i];
                for j in 0..=i {
                    cov[i * d + j] += di * (h[r.start + j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in 0..=i {
                cov[i * d + j] /= (n - 1) as f64;
            }
            cov[i * d + i] += 1e-12;
        }
        if let Some(l) = cholesky(&cov, d) {
            self.chol = l;
            self.lambda = 2.38 / (d as f64).sqrt();
        }
    }
}

fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * d + k] * l[j * d + k]).sum();
            if i == j {
                let v = a[i * d + i] - s;
                if !(v > 0.0) || !v.is_finite() {
                    return None;
                }
                l[i * d + i] = v.sqrt();
            } else {
                l[i * d + j] = (a[i * d + j] - s) / l[j * d + j];
            }
        }
    }
    Some(l)
}

struct ChainOutput {
    draws: Vec<Vec<f64>>,
    accepted: usize,
    proposed: usize,
}

fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

fn run_chain<T: LogDensity + ?Sized>(target: &T, init: &[f64], config: &ChainConfig, chain: usize) -> Result<ChainOutput> {
    let dim = target.dim();
    let mut rng = chain_rng(config.seed, chain);
    let scales = config.step_scales.clone().unwrap_or_else(|| vec![0.05; dim]);
    let mut proposals: Vec<BlockProposal> = target
        .blocks()
        .into_iter()
        .map(|range| {
            let d = range.len();
            let mut chol = vec![0.0; d * d];
            for i in 0..d {
                chol[i * d + i] = scales[range.start + i];
            }
            BlockProposal { range, chol, lambda: 1.0 }
        })
        .collect();

    let mut eval = target.evaluator();
    let mut theta = init.to_vec();
    let mut current = eval.reset(&theta);
    let mut proposal = theta.clone();
    let mut z = Vec::new();

    let n_blocks = proposals.len();
    let mut window_accepts = vec![0usize; n_blocks];
    let mut burn_history: Vec<Vec<f64>> = Vec::new();
    let learn_every = config.n_burn / 4;
    let mut stalled = 0usize;
    let stall_limit = 10 * dim;

    let mut out = ChainOutput { draws: Vec::with_capacity(config.retained_per_chain()), accepted: 0, proposed: 0 };

    for sweep in 0..config.n_iter {
        let burning = sweep < config.n_burn;
        let mut any_finite = false;
        for (b, prop) in proposals.iter().enumerate() {
            proposal.copy_from_slice(&theta);
            prop.perturb(&mut proposal, &mut rng, &mut z);
            let lp = eval.propose(&proposal, b);
            let u: f64 = rng.random();
            let accept = if lp.is_nan() || lp == f64::NEG_INFINITY {
                false
            } else {
                any_finite = true;
                !current.is_finite() || lp >= current || u.ln() < lp - current
            };
            if accept {
                eval.accept();
                theta.copy_from_slice(&proposal);
                current = lp;
                window_accepts[b] += 1;
            }
            if !burning {
                out.proposed += 1;
                out.accepted += accept as usize;
            }
        }
        stalled = if any_finite { 0 } else { stalled + 1 };
        if stalled >= stall_limit {
            return Err(TcaError::DivergentChain { chain, sweeps: stalled });
        }

        if burning && config.adapt_during_burn {
            burn_history.push(theta.clone());
            if (sweep + 1) % ADAPT_WINDOW == 0 {
                let rates: Vec<f64> = window_accepts.iter().map(|&a| a as f64 / ADAPT_WINDOW as f64).collect();
                let lambdas: Vec<f64> = proposals.iter().map(|p| p.lambda).collect();
                for (p, l) in proposals.iter_mut().zip(adapt_steps(&lambdas, &rates)) {
                    p.lambda = l;
                }
                window_accepts.iter_mut().for_each(|a| *a = 0);
            }
            if learn_every >= ADAPT_WINDOW && (sweep + 1) % learn_every == 0 && sweep + 1 < config.n_burn {
                let t = sweep + 1;
                for p in &mut proposals {
                    p.learn_shape(&burn_history[t / 2..t]);
                }
            }
        } else if !burning && (sweep + 1 - config.n_burn) % config.thinning == 0 {
            out.draws.push(theta.clone());
        }
    }
    Ok(out)
}

/// Run `config.n_chains` independent chains from `init`; results are merged
/// in chain order, so output is identical for a given seed regardless of
/// thread scheduling.
pub fn run_chains<T: LogDensity + ?Sized>(target: &T, init: &[f64], config: &ChainConfig) -> Result<PosteriorSamples> {
    config.validate(target.dim())?;
    if init.len() != target.dim() {
        return Err(TcaError::Config(format!("initial point has {} values, target needs {}", init.len(), target.dim())));
    }
    let outputs: Vec<Result<ChainOutput>> =
        (0..config.n_chains).into_par_iter().map(|c| run_chain(target, init, config, c)).collect();
    let mut draws = Vec::new();
    let mut chain = Vec::new();
    let (mut accepted, mut proposed) = (0usize, 0usize);
    for (c, o) in outputs.into_iter().enumerate() {
        let o = o?;
        accepted += o.accepted;
        proposed += o.proposed;
        chain.extend(std::iter::repeat_n(c, o.draws.len()));
        draws.extend(o.draws);
    }
    let mut samples = PosteriorSamples::from_draws(target.param_names(), draws, chain);
    samples.acceptance_rate = accepted as f64 / proposed.max(1) as f64;
    Ok(samples)
}

/// Fit a benchmark model: pooled models use a single coefficient vector,
/// per-algorithm models share the scale block across algorithms. Chains
/// start at the prior means.
pub fn run_mh(model: &ModelSpec, observations: &[BenchmarkObservation], config: &ChainConfig) -> Result<PosteriorSamples> {
    match &model.pooling {
        Pooling::Pooled => {
            if observations.is_empty() {
                return Err(TcaError::InvalidInput("pooled fit needs at least one observation".into()));
            }
            let target = GenericPosterior::new(model.kind, model.prior.clone(), observations)?;
            run_chains(&target, &model.prior.means(), config)
        }
        Pooling::PerAlgo { algos } => {
            let target = HierarchicalPosterior::new(model.kind, &model.prior, algos, observations)?;
            run_chains(&target, &target.prior_means(), config)
        }
    }
}

/// Posterior predictive draws: for every retained draw and every covariate
/// point, `n_per_draw` ALD samples. `samples` must be in the standard
/// coefficient layout (see [`PosteriorSamples::coefficients_for`]).
pub fn posterior_predictive(
    samples: &PosteriorSamples,
    kind: BenchmarkKind,
    x_list: &[Covariates],
    n_per_draw: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if samples.n_draws() == 0 {
        return Err(TcaError::InvalidInput("posterior has no draws".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples.n_draws() * x_list.len() * n_per_draw);
    for c in samples.coefficient_draws(kind)? {
        for x in x_list {
            let p = link(&c, x, kind)?;
            out.extend((0..n_per_draw).map(|_| p.sample_with(&mut rng)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct StdNormal(usize);

    impl LogDensity for StdNormal {
        fn dim(&self) -> usize {
            self.0
        }
        fn log_density(&self, theta: &[f64]) -> f64 {
            -0.5 * theta.iter().map(|x| x * x).sum::<f64>()
        }
    }

    struct Flat;

    impl LogDensity for Flat {
        fn dim(&self) -> usize {
            2
        }
        fn log_density(&self, _theta: &[f64]) -> f64 {
            0.0
        }
    }

    struct Nowhere;

    impl LogDensity for Nowhere {
        fn dim(&self) -> usize {
            1
        }
        fn log_density(&self, _theta: &[f64]) -> f64 {
            f64::NEG_INFINITY
        }
    }

    fn small() -> ChainConfig {
        ChainConfig { n_iter: 3_000, n_burn: 1_000, thinning: 4, n_chains: 3, seed: 5, ..ChainConfig::default() }
    }

    #[test]
    fn adapt_direction() {
        assert!(adapt_steps(&[1.0], &[0.05])[0] < 1.0);
        assert!(adapt_steps(&[1.0], &[0.8])[0] > 1.0);
        assert_eq!(adapt_steps(&[1.0], &[0.3])[0], 1.0);
        assert_eq!(adapt_steps(&[0.7, 2.0], &[0.2, 0.4]), vec![0.7, 2.0]);
    }

    #[test]
    fn flat_target_accepts_everything() {
        let s = run_chains(&Flat, &[0.0, 0.0], &small()).unwrap();
        assert_eq!(s.acceptance_rate, 1.0);
    }

    #[test]
    fn retained_count() {
        let cfg = small();
        let s = run_chains(&StdNormal(2), &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(s.n_draws(), cfg.n_chains * (cfg.n_iter - cfg.n_burn) / cfg.thinning);
        assert_eq!(s.chain.iter().filter(|&&c| c == 2).count(), 500);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = run_chains(&StdNormal(3), &[0.0; 3], &small()).unwrap();
        let b = run_chains(&StdNormal(3), &[0.0; 3], &small()).unwrap();
        assert_eq!(a.draws, b.draws);
        let mut other = small();
        other.seed = 6;
        let c = run_chains(&StdNormal(3), &[0.0; 3], &other).unwrap();
        assert_ne!(a.draws, c.draws);
    }

    #[test]
    fn divergence_detected() {
        let err = run_chains(&Nowhere, &[0.0], &small()).unwrap_err();
        assert!(matches!(err, TcaError::DivergentChain { sweeps: 10, .. }));
    }

    #[test]
    fn config_validation() {
        let mut c = small();
        c.n_burn = c.n_iter;
        assert!(c.validate(1).is_err());
        let mut c = small();
        c.thinning = 0;
        assert!(c.validate(1).is_err());
        let mut c = small();
        c.n_chains = 1;
        assert!(c.validate(1).is_err());
        let mut c = small();
        c.step_scales = Some(vec![0.1]);
        assert!(c.validate(2).is_err());
        assert_eq!(ChainConfig::long_run().retained_per_chain(), 5_000);
    }

    #[test]
    fn cholesky_small() {
        let l = cholesky(&[4.0, 0.0, 2.0, 5.0], 2).unwrap();
        assert_eq!(l, vec![2.0, 0.0, 1.0, 2.0]);
        assert!(cholesky(&[1.0, 0.0, 2.0, 1.0], 2).is_none());
    }
}
