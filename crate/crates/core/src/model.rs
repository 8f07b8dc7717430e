//! Regression links from order/stock covariates to ALD parameters, priors,
//! and the log-posterior targets used by the sampler.
//!
//! All three parameters use multiplicative (log-linear) links:
//!
//! ```text
//! mu    = -exp(b0 + b1 ln X1 + b2 ln X2 + b3 ln X3 + b4 ln X4)
//! sigma =  exp(g0 + g1 ln X1 + ... + g4 ln X4 [+ g5 ln(|X2 - 20| + g6)])   (bracket: PWP20 only)
//! r     =  exp(a0 + a1 ln X1 + a2 ln X2),   kappa = (r + sqrt(4 + r^2)) / 2
//! ```
//!
//! Flat coefficient order is `beta0..beta4, gamma0..gamma4[, gamma5, gamma6], alpha0..alpha2`.

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::ald::{kappa_from_r, AldParams};
use crate::benchmark::{BenchmarkKind, BenchmarkObservation};
use crate::error::{Result, TcaError};
use crate::sampler::{BlockEvaluator, LogDensity, PosteriorSamples};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
/// Participation rate around which the PWP20 scale collapses.
pub const PWP_TARGET_RATE: f64 = 20.0;
/// Floor applied to stage-1 posterior standard deviations.
pub const MIN_PRIOR_STD: f64 = 1e-6;
/// Minimum retained stage-1 draws to build a hierarchical prior.
pub const MIN_STAGE1_DRAWS: usize = 100;

/// Order and stock characteristics: Size/ADV (fraction), participation rate
/// (%), annualized volatility (%), spread (bps).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Covariates {
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
    pub x4: f64,
}

impl Covariates {
    pub fn new(x1: f64, x2: f64, x3: f64, x4: f64) -> Self {
        Self { x1, x2, x3, x4 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [("x1", self.x1), ("x2", self.x2), ("x3", self.x3), ("x4", self.x4)] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(TcaError::InvalidCovariate { name, value });
            }
        }
        Ok(())
    }

    fn logs(&self) -> [f64; 4] {
        [self.x1.ln(), self.x2.ln(), self.x3.ln(), self.x4.ln()]
    }
}

pub fn gamma_len(kind: BenchmarkKind) -> usize {
    if kind == BenchmarkKind::PWP20 {
        7
    } else {
        5
    }
}

pub fn n_coefficients(kind: BenchmarkKind) -> usize {
    5 + gamma_len(kind) + 3
}

/// Canonical coefficient names in flat order.
pub fn coefficient_names(kind: BenchmarkKind) -> Vec<String> {
    let beta = (0..5).map(|i| format!("beta{i}"));
    let gamma = (0..gamma_len(kind)).map(|i| format!("gamma{i}"));
    let alpha = (0..3).map(|i| format!("alpha{i}"));
    beta.chain(gamma).chain(alpha).collect()
}

/// Location (beta), scale (gamma) and skew (alpha) groups of a flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoefficientGroup {
    Location,
    Scale,
    Skew,
}

pub fn group_ranges(kind: BenchmarkKind) -> [(CoefficientGroup, Range<usize>); 3] {
    let g = gamma_len(kind);
    [
        (CoefficientGroup::Location, 0..5),
        (CoefficientGroup::Scale, 5..5 + g),
        (CoefficientGroup::Skew, 5 + g..8 + g),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientVector {
    pub beta: [f64; 5],
    pub gamma: Vec<f64>,
    pub alpha: [f64; 3],
}

impl CoefficientVector {
    pub fn kind_matches(&self, kind: BenchmarkKind) -> bool {
        self.gamma.len() == gamma_len(kind)
    }

    fn check(&self, kind: BenchmarkKind) -> Result<()> {
        if !self.kind_matches(kind) {
            return Err(TcaError::SpecMismatch(format!(
                "{kind} needs {} scale coefficients, got {}",
                gamma_len(kind),
                self.gamma.len()
            )));
        }
        Ok(())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.beta.iter().chain(&self.gamma).chain(&self.alpha).copied().collect()
    }

    pub fn from_flat(kind: BenchmarkKind, flat: &[f64]) -> Result<Self> {
        let n = n_coefficients(kind);
        if flat.len() != n {
            return Err(TcaError::SpecMismatch(format!("{kind} needs {n} coefficients, got {}", flat.len())));
        }
        let g = gamma_len(kind);
        Ok(Self {
            beta: flat[0..5].try_into().expect("5 location coefficients"),
            gamma: flat[5..5 + g].to_vec(),
            alpha: flat[5 + g..].try_into().expect("3 skew coefficients"),
        })
    }

    /// US generic-model posterior means for each benchmark;
    /// used as realistic ground truth for synthetic data.
    pub fn reference_us(kind: BenchmarkKind) -> Self {
        match kind {
            BenchmarkKind::IS => Self {
                beta: [0.89, 0.46, 0.09, 0.83, 0.16],
                gamma: vec![3.76, 0.43, -0.45, 0.64, 0.2],
                alpha: [-3.4, -0.22, 0.49],
            },
            BenchmarkKind::VWAP => Self {
                beta: [-1.12, 0.08, 0.0, 0.01, 0.85],
                gamma: vec![0.84, 0.18, -0.33, 0.43, 0.36],
                alpha: [-5.1, -0.46, 0.13],
            },
            BenchmarkKind::PWP20 => Self {
                beta: [-0.02, 0.14, -0.32, 0.13, 0.72],
                gamma: vec![-0.2, 0.33, -0.5, 0.63, 0.19, 1.04, 5.91],
                alpha: [-3.45, -0.28, 0.24],
            },
            BenchmarkKind::Rev5m => Self {
                beta: [-2.93, -0.09, 0.47, 0.17, 0.71],
                gamma: vec![-0.45, -0.02, 0.07, 0.53, 0.24],
                alpha: [-1.73, 0.0, 0.24],
            },
        }
    }
}

/// Map coefficients and covariates to ALD parameters.
pub fn link(coeffs: &CoefficientVector, x: &Covariates, kind: BenchmarkKind) -> Result<AldParams> {
    coeffs.check(kind)?;
    x.validate()?;
    let l = x.logs();
    let b = &coeffs.beta;
    let g = &coeffs.gamma;
    let a = &coeffs.alpha;
    let mu_ln = b[0] + b[1] * l[0] + b[2] * l[1] + b[3] * l[2] + b[4] * l[3];
    let mut sigma_ln = g[0] + g[1] * l[0] + g[2] * l[1] + g[3] * l[2] + g[4] * l[3];
    if kind == BenchmarkKind::PWP20 {
        sigma_ln += g[5] * ((x.x2 - PWP_TARGET_RATE).abs() + g[6]).ln();
    }
    let r = (a[0] + a[1] * l[0] + a[2] * l[1]).exp();
    AldParams::new(-mu_ln.exp(), sigma_ln.exp(), kappa_from_r(r)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientPooling {
    /// One value for every algorithm.
    #[default]
    Shared,
    /// Estimated separately for each algorithm.
    PerAlgo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorEntry {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    #[serde(default)]
    pub truncated_at_zero: bool,
    #[serde(default)]
    pub pooling: CoefficientPooling,
}

impl PriorEntry {
    fn new(name: impl Into<String>, mean: f64, std: f64) -> Self {
        Self { name: name.into(), mean, std, truncated_at_zero: false, pooling: CoefficientPooling::Shared }
    }

    #[inline]
    fn log_density(&self, v: f64) -> f64 {
        if self.truncated_at_zero && v <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let z = (v - self.mean) / self.std;
        -LN_SQRT_2PI - self.std.ln() - 0.5 * z * z
    }
}

/// Independent normal priors, one per coefficient in flat order. The
/// truncation normalizer is constant and omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub entries: Vec<PriorEntry>,
}

impl PriorSpec {
    /// Weakly informative defaults for the generic model.
    pub fn default_for(kind: BenchmarkKind) -> Self {
        let mut entries = vec![PriorEntry::new("beta0", 0.0, 2.0)];
        entries.extend((1..5).map(|i| PriorEntry::new(format!("beta{i}"), 0.5, 0.5)));
        entries.push(PriorEntry::new("gamma0", 0.0, 2.0));
        entries.extend((1..5).map(|i| PriorEntry::new(format!("gamma{i}"), 0.5, 0.5)));
        if kind == BenchmarkKind::PWP20 {
            entries.push(PriorEntry::new("gamma5", 0.5, 0.5));
            let mut g6 = PriorEntry::new("gamma6", 1.0, 1.0);
            g6.truncated_at_zero = true;
            entries.push(g6);
        }
        entries.push(PriorEntry::new("alpha0", -5.0, 2.0));
        entries.extend((1..3).map(|i| PriorEntry::new(format!("alpha{i}"), 0.0, 0.5)));
        Self { entries }
    }

    pub fn means(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.mean).collect()
    }

    pub fn validate(&self, kind: BenchmarkKind) -> Result<()> {
        let names = coefficient_names(kind);
        if self.entries.len() != names.len() {
            return Err(TcaError::SpecMismatch(format!(
                "{kind} prior needs {} entries, got {}",
                names.len(),
                self.entries.len()
            )));
        }
        for (e, name) in self.entries.iter().zip(&names) {
            if &e.name != name {
                return Err(TcaError::SpecMismatch(format!("prior entry '{}' where '{name}' expected", e.name)));
            }
            if !(e.std > 0.0 && e.std.is_finite()) || !e.mean.is_finite() {
                return Err(TcaError::SpecMismatch(format!("prior '{name}' needs finite mean and std > 0")));
            }
            if e.truncated_at_zero && name != "gamma6" {
                return Err(TcaError::SpecMismatch(format!("only gamma6 may be truncated, not '{name}'")));
            }
        }
        Ok(())
    }

    fn log_density_flat(&self, flat: &[f64]) -> f64 {
        self.entries.iter().zip(flat).map(|(e, v)| e.log_density(*v)).sum()
    }
}

pub fn log_prior(coeffs: &CoefficientVector, prior: &PriorSpec) -> Result<f64> {
    let flat = coeffs.to_flat();
    if flat.len() != prior.entries.len() {
        return Err(TcaError::SpecMismatch(format!(
            "{} coefficients against {} prior entries",
            flat.len(),
            prior.entries.len()
        )));
    }
    Ok(prior.log_density_flat(&flat))
}

/// Unnormalized log posterior evaluated observation by observation through
/// [`link`] and [`AldParams::log_pdf`]. The sampler uses the cached
/// evaluators below; this is the reference route.
pub fn log_posterior(
    coeffs: &CoefficientVector,
    observations: &[BenchmarkObservation],
    prior: &PriorSpec,
    kind: BenchmarkKind,
) -> Result<f64> {
    let mut total = log_prior(coeffs, prior)?;
    if total == f64::NEG_INFINITY {
        return Ok(total);
    }
    for o in observations {
        if o.kind != kind {
            return Err(TcaError::SpecMismatch(format!("{} observation in a {kind} model", o.kind)));
        }
        total += link(coeffs, &o.covariates(), kind)?.log_pdf(o.y)?;
    }
    Ok(total)
}

/// Stage-2 prior: each coefficient gets a normal prior with the stage-1
/// marginal mean and standard deviation. Location and skew coefficients
/// become per-algorithm, scale coefficients stay shared.
pub fn hierarchical_prior_from_posterior(stage1: &PosteriorSamples, kind: BenchmarkKind) -> Result<PriorSpec> {
    let generic = stage1.coefficients_for(None, kind)?;
    if generic.n_draws() < MIN_STAGE1_DRAWS {
        return Err(TcaError::InsufficientSamples { needed: MIN_STAGE1_DRAWS, got: generic.n_draws() });
    }
    let entries = coefficient_names(kind)
        .into_iter()
        .enumerate()
        .map(|(j, name)| {
            let col = generic.column(j);
            let (mean, std) = crate::stats::mean_std(&col);
            let pooling = if name.starts_with("gamma") {
                CoefficientPooling::Shared
            } else {
                CoefficientPooling::PerAlgo
            };
            PriorEntry { truncated_at_zero: name == "gamma6", name, mean, std: std.max(MIN_PRIOR_STD), pooling }
        })
        .collect();
    Ok(PriorSpec { entries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Pooling {
    /// Algorithm labels are discarded; one coefficient vector.
    Pooled,
    /// Per-algorithm location/skew with shared scale. An empty list means
    /// every algorithm present in the data.
    PerAlgo {
        #[serde(default)]
        algos: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: BenchmarkKind,
    pub prior: PriorSpec,
    pub pooling: Pooling,
}

impl ModelSpec {
    pub fn generic(kind: BenchmarkKind) -> Self {
        Self { kind, prior: PriorSpec::default_for(kind), pooling: Pooling::Pooled }
    }

    /// Stage-2 model whose prior comes from a stage-1 posterior.
    pub fn per_algo(kind: BenchmarkKind, stage1: &PosteriorSamples, algos: Vec<String>) -> Result<Self> {
        Ok(Self { kind, prior: hierarchical_prior_from_posterior(stage1, kind)?, pooling: Pooling::PerAlgo { algos } })
    }
}

/// Observations of one benchmark kind in structure-of-arrays form with the
/// covariate logs precomputed.
#[derive(Debug, Clone, Default)]
pub struct Design {
    pub y: Vec<f64>,
    pub ln_x: [Vec<f64>; 4],
    /// `|X2 - 20|`, used by the PWP20 scale link.
    pub dev_target: Vec<f64>,
}

impl Design {
    pub fn new<'a>(kind: BenchmarkKind, observations: impl IntoIterator<Item = &'a BenchmarkObservation>) -> Result<Self> {
        let mut d = Design::default();
        for o in observations {
            if o.kind != kind {
                return Err(TcaError::SpecMismatch(format!("{} observation in a {kind} model", o.kind)));
            }
            if !o.y.is_finite() {
                return Err(TcaError::InvalidInput(format!("non-finite benchmark value {}", o.y)));
            }
            let x = o.covariates();
            x.validate()?;
            d.y.push(o.y);
            for (col, v) in d.ln_x.iter_mut().zip(x.logs()) {
                col.push(v);
            }
            d.dev_target.push((x.x2 - PWP_TARGET_RATE).abs());
        }
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Per-observation likelihood terms for one design, cached per group so a
/// block proposal only recomputes the terms of the group it touches.
#[derive(Debug, Clone)]
struct LikelihoodCache<'a> {
    design: &'a Design,
    pwp: bool,
    // location: |mu|
    neg_mu: Vec<f64>,
    // scale: 1/sigma and ln sigma
    inv_sigma: Vec<f64>,
    ln_sigma: Vec<f64>,
    // skew: kappa, 1/kappa, ln(kappa + 1/kappa)
    kappa: Vec<f64>,
    inv_kappa: Vec<f64>,
    ln_norm: Vec<f64>,
    scratch: [Vec<f64>; 3],
    pending: Option<CoefficientGroup>,
}

impl<'a> LikelihoodCache<'a> {
    fn new(design: &'a Design, kind: BenchmarkKind) -> Self {
        let n = design.len();
        let z = || vec![0.0; n];
        Self {
            design,
            pwp: kind == BenchmarkKind::PWP20,
            neg_mu: z(),
            inv_sigma: z(),
            ln_sigma: z(),
            kappa: z(),
            inv_kappa: z(),
            ln_norm: z(),
            scratch: [z(), z(), z()],
            pending: None,
        }
    }

    fn fill_location(&self, beta: &[f64], out: &mut [f64]) {
        let l = &self.design.ln_x;
        for (i, o) in out.iter_mut().enumerate() {
            *o = (beta[0] + beta[1] * l[0][i] + beta[2] * l[1][i] + beta[3] * l[2][i] + beta[4] * l[3][i]).exp();
        }
    }

    fn fill_scale(&self, gamma: &[f64], inv_sigma: &mut [f64], ln_sigma: &mut [f64]) {
        let l = &self.design.ln_x;
        for i in 0..inv_sigma.len() {
            let mut s = gamma[0] + gamma[1] * l[0][i] + gamma[2] * l[1][i] + gamma[3] * l[2][i] + gamma[4] * l[3][i];
            if self.pwp {
                s += gamma[5] * (self.design.dev_target[i] + gamma[6]).ln();
            }
            ln_sigma[i] = s;
            inv_sigma[i] = (-s).exp();
        }
    }

    fn fill_skew(&self, alpha: &[f64], kappa: &mut [f64], inv_kappa: &mut [f64], ln_norm: &mut [f64]) {
        let l = &self.design.ln_x;
        for i in 0..kappa.len() {
            let r = (alpha[0] + alpha[1] * l[0][i] + alpha[2] * l[1][i]).exp();
            // kappa + 1/kappa = sqrt(4 + r^2), kappa - 1/kappa = r
            let q = (4.0 + r * r).sqrt();
            kappa[i] = 0.5 * (r + q);
            inv_kappa[i] = 0.5 * (q - r);
            ln_norm[i] = q.ln();
        }
    }

    fn sum(&self, neg_mu: &[f64], inv_sigma: &[f64], ln_sigma: &[f64], kappa: &[f64], inv_kappa: &[f64], ln_norm: &[f64]) -> f64 {
        let y = &self.design.y;
        let mut total = 0.0;
        for i in 0..y.len() {
            let d = y[i] + neg_mu[i];
            let rate = if d >= 0.0 { kappa[i] } else { -inv_kappa[i] };
            total += -ln_sigma[i] - ln_norm[i] - d * inv_sigma[i] * rate;
        }
        if total.is_nan() {
            f64::NEG_INFINITY
        } else {
            total
        }
    }

    fn reset(&mut self, kind: BenchmarkKind, flat: &[f64]) -> f64 {
        let [(_, lr), (_, sr), (_, kr)] = group_ranges(kind);
        let mut neg_mu = std::mem::take(&mut self.neg_mu);
        let (mut inv_sigma, mut ln_sigma) = (std::mem::take(&mut self.inv_sigma), std::mem::take(&mut self.ln_sigma));
        let (mut kappa, mut inv_kappa, mut ln_norm) =
            (std::mem::take(&mut self.kappa), std::mem::take(&mut self.inv_kappa), std::mem::take(&mut self.ln_norm));
        self.fill_location(&flat[lr], &mut neg_mu);
        self.fill_scale(&flat[sr], &mut inv_sigma, &mut ln_sigma);
        self.fill_skew(&flat[kr], &mut kappa, &mut inv_kappa, &mut ln_norm);
        self.neg_mu = neg_mu;
        self.inv_sigma = inv_sigma;
        self.ln_sigma = ln_sigma;
        self.kappa = kappa;
        self.inv_kappa = inv_kappa;
        self.ln_norm = ln_norm;
        self.pending = None;
        self.sum(&self.neg_mu, &self.inv_sigma, &self.ln_sigma, &self.kappa, &self.inv_kappa, &self.ln_norm)
    }

    /// Log-likelihood with `group` replaced by the given coefficients.
    fn propose(&mut self, group: CoefficientGroup, coeffs: &[f64]) -> f64 {
        let mut s = std::mem::take(&mut self.scratch);
        let ll = match group {
            CoefficientGroup::Location => {
                self.fill_location(coeffs, &mut s[0]);
                self.sum(&s[0], &self.inv_sigma, &self.ln_sigma, &self.kappa, &self.inv_kappa, &self.ln_norm)
            }
            CoefficientGroup::Scale => {
                let [a, b, _] = &mut s;
                self.fill_scale(coeffs, a, b);
                self.sum(&self.neg_mu, &s[0], &s[1], &self.kappa, &self.inv_kappa, &self.ln_norm)
            }
            CoefficientGroup::Skew => {
                let [a, b, c] = &mut s;
                self.fill_skew(coeffs, a, b, c);
                self.sum(&self.neg_mu, &self.inv_sigma, &self.ln_sigma, &s[0], &s[1], &s[2])
            }
        };
        self.scratch = s;
        self.pending = Some(group);
        ll
    }

    fn accept(&mut self) {
        match self.pending.take() {
            Some(CoefficientGroup::Location) => std::mem::swap(&mut self.neg_mu, &mut self.scratch[0]),
            Some(CoefficientGroup::Scale) => {
                std::mem::swap(&mut self.inv_sigma, &mut self.scratch[0]);
                std::mem::swap(&mut self.ln_sigma, &mut self.scratch[1]);
            }
            Some(CoefficientGroup::Skew) => {
                std::mem::swap(&mut self.kappa, &mut self.scratch[0]);
                std::mem::swap(&mut self.inv_kappa, &mut self.scratch[1]);
                std::mem::swap(&mut self.ln_norm, &mut self.scratch[2]);
            }
            None => {}
        }
    }
}

/// Pooled-model posterior over one flat coefficient vector.
#[derive(Debug, Clone)]
pub struct GenericPosterior {
    pub kind: BenchmarkKind,
    pub prior: PriorSpec,
    pub design: Design,
}

impl GenericPosterior {
    pub fn new(kind: BenchmarkKind, prior: PriorSpec, observations: &[BenchmarkObservation]) -> Result<Self> {
        prior.validate(kind)?;
        Ok(Self { kind, prior, design: Design::new(kind, observations)? })
    }
}

struct GenericEvaluator<'a> {
    target: &'a GenericPosterior,
    cache: LikelihoodCache<'a>,
    ll: f64,
    pending_ll: f64,
}

impl BlockEvaluator for GenericEvaluator<'_> {
    fn reset(&mut self, theta: &[f64]) -> f64 {
        self.ll = self.cache.reset(self.target.kind, theta);
        self.target.prior.log_density_flat(theta) + self.ll
    }

    fn propose(&mut self, theta: &[f64], block: usize) -> f64 {
        let lp = self.target.prior.log_density_flat(theta);
        if lp == f64::NEG_INFINITY {
            self.cache.pending = None;
            return lp;
        }
        let (group, range) = group_ranges(self.target.kind)[block].clone();
        self.pending_ll = self.cache.propose(group, &theta[range]);
        lp + self.pending_ll
    }

    fn accept(&mut self) {
        self.cache.accept();
        self.ll = self.pending_ll;
    }
}

impl LogDensity for GenericPosterior {
    fn dim(&self) -> usize {
        n_coefficients(self.kind)
    }

    fn blocks(&self) -> Vec<Range<usize>> {
        group_ranges(self.kind).into_iter().map(|(_, r)| r).collect()
    }

    fn param_names(&self) -> Vec<String> {
        coefficient_names(self.kind)
    }

    fn log_density(&self, theta: &[f64]) -> f64 {
        let lp = self.prior.log_density_flat(theta);
        if lp == f64::NEG_INFINITY {
            return lp;
        }
        let mut cache = LikelihoodCache::new(&self.design, self.kind);
        lp + cache.reset(self.kind, theta)
    }

    fn evaluator(&self) -> Box<dyn BlockEvaluator + '_> {
        Box::new(GenericEvaluator { target: self, cache: LikelihoodCache::new(&self.design, self.kind), ll: 0.0, pending_ll: 0.0 })
    }
}

/// Partially pooled posterior. Flat layout: shared scale coefficients first,
/// then for each algorithm its 5 location and 3 skew coefficients.
#[derive(Debug, Clone)]
pub struct HierarchicalPosterior {
    pub kind: BenchmarkKind,
    pub algos: Vec<String>,
    designs: Vec<Design>,
    /// Prior expanded to the flat layout.
    flat_prior: PriorSpec,
    names: Vec<String>,
}

const ALGO_BLOCK: usize = 8;

impl HierarchicalPosterior {
    /// `algos` empty means every algorithm in the data, sorted by id.
    /// Algorithms without observations are kept and sample their prior.
    pub fn new(kind: BenchmarkKind, prior: &PriorSpec, algos: &[String], observations: &[BenchmarkObservation]) -> Result<Self> {
        prior.validate(kind)?;
        let algos: Vec<String> = if algos.is_empty() {
            observations.iter().map(|o| o.algo_id.clone()).collect::<BTreeSet<_>>().into_iter().collect()
        } else {
            algos.to_vec()
        };
        if algos.is_empty() {
            return Err(TcaError::Config("per-algorithm model needs at least one algorithm".into()));
        }
        let designs = algos
            .iter()
            .map(|a| Design::new(kind, observations.iter().filter(|o| &o.algo_id == a)))
            .collect::<Result<Vec<_>>>()?;

        let g = gamma_len(kind);
        let mut entries: Vec<PriorEntry> = prior.entries[5..5 + g].to_vec();
        let mut names: Vec<String> = entries.iter().map(|e| e.name.clone()).collect();
        for a in &algos {
            for e in prior.entries[0..5].iter().chain(&prior.entries[5 + g..]) {
                let mut e = e.clone();
                e.name = format!("{}[{a}]", e.name);
                names.push(e.name.clone());
                entries.push(e);
            }
        }
        Ok(Self { kind, algos, designs, flat_prior: PriorSpec { entries }, names })
    }

    pub fn prior_means(&self) -> Vec<f64> {
        self.flat_prior.means()
    }

    fn algo_offset(&self, k: usize) -> usize {
        gamma_len(self.kind) + ALGO_BLOCK * k
    }

    /// Standard flat coefficients of algorithm `k`.
    fn algo_coefficients(&self, theta: &[f64], k: usize, out: &mut Vec<f64>) {
        let g = gamma_len(self.kind);
        let off = self.algo_offset(k);
        out.clear();
        out.extend_from_slice(&theta[off..off + 5]);
        out.extend_from_slice(&theta[0..g]);
        out.extend_from_slice(&theta[off + 5..off + ALGO_BLOCK]);
    }
}

struct HierarchicalEvaluator<'a> {
    target: &'a HierarchicalPosterior,
    caches: Vec<LikelihoodCache<'a>>,
    ll: Vec<f64>,
    pending: Vec<(usize, f64)>,
}

impl BlockEvaluator for HierarchicalEvaluator<'_> {
    fn reset(&mut self, theta: &[f64]) -> f64 {
        let mut buf = Vec::new();
        let kind = self.target.kind;
        for (k, cache) in self.caches.iter_mut().enumerate() {
            self.target.algo_coefficients(theta, k, &mut buf);
            self.ll[k] = cache.reset(kind, &buf);
        }
        self.pending.clear();
        self.target.flat_prior.log_density_flat(theta) + self.ll.iter().sum::<f64>()
    }

    fn propose(&mut self, theta: &[f64], block: usize) -> f64 {
        self.pending.clear();
        let lp = self.target.flat_prior.log_density_flat(theta);
        if lp == f64::NEG_INFINITY {
            return lp;
        }
        let g = gamma_len(self.target.kind);
        if block == 0 {
            for (k, cache) in self.caches.iter_mut().enumerate() {
                let ll = cache.propose(CoefficientGroup::Scale, &theta[0..g]);
                self.pending.push((k, ll));
            }
        } else {
            let k = (block - 1) / 2;
            let off = self.target.algo_offset(k);
            let ll = if block % 2 == 1 {
                self.caches[k].propose(CoefficientGroup::Location, &theta[off..off + 5])
            } else {
                self.caches[k].propose(CoefficientGroup::Skew, &theta[off + 5..off + ALGO_BLOCK])
            };
            self.pending.push((k, ll));
        }
        let mut total = lp;
        let mut j = 0;
        for (k, cur) in self.ll.iter().enumerate() {
            if j < self.pending.len() && self.pending[j].0 == k {
                total += self.pending[j].1;
                j += 1;
            } else {
                total += cur;
            }
        }
        total
    }

    fn accept(&mut self) {
        for &(k, ll) in &self.pending {
            self.caches[k].accept();
            self.ll[k] = ll;
        }
        self.pending.clear();
    }
}

impl LogDensity for HierarchicalPosterior {
    fn dim(&self) -> usize {
        gamma_len(self.kind) + ALGO_BLOCK * self.algos.len()
    }

    /// Shared scale block, then location and skew blocks per algorithm.
    fn blocks(&self) -> Vec<Range<usize>> {
        let mut blocks = vec![0..gamma_len(self.kind)];
        for k in 0..self.algos.len() {
            let off = self.algo_offset(k);
            blocks.push(off..off + 5);
            blocks.push(off + 5..off + ALGO_BLOCK);
        }
        blocks
    }

    fn param_names(&self) -> Vec<String> {
        self.names.clone()
    }

    fn log_density(&self, theta: &[f64]) -> f64 {
        let lp = self.flat_prior.log_density_flat(theta);
        if lp == f64::NEG_INFINITY {
            return lp;
        }
        let mut buf = Vec::new();
        let ll: f64 = self
            .designs
            .iter()
            .enumerate()
            .map(|(k, d)| {
                self.algo_coefficients(theta, k, &mut buf);
                LikelihoodCache::new(d, self.kind).reset(self.kind, &buf)
            })
            .sum();
        lp + ll
    }

    fn evaluator(&self) -> Box<dyn BlockEvaluator + '_> {
        let caches = self.designs.iter().map(|d| LikelihoodCache::new(d, self.kind)).collect();
        Box::new(HierarchicalEvaluator { target: self, caches, ll: vec![0.0; self.algos.len()], pending: Vec::new() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn obs(kind: BenchmarkKind, y: f64, x: Covariates, algo: &str) -> BenchmarkObservation {
        BenchmarkObservation {
            y,
            kind,
            x1: x.x1,
            x2: x.x2,
            x3: x.x3,
            x4: x.x4,
            algo_id: algo.into(),
            order_id: None,
            duration_ms: None,
        }
    }

    #[test]
    fn zero_location_coefficients_give_unit_cost() {
        let mut c = CoefficientVector::reference_us(BenchmarkKind::IS);
        c.beta = [0.0; 5];
        for x in [Covariates::new(0.01, 5.0, 20.0, 3.0), Covariates::new(0.2, 40.0, 80.0, 50.0)] {
            assert_abs_diff_eq!(link(&c, &x, BenchmarkKind::IS).unwrap().mu, -1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn reference_is_link_matches_scalar_oracle() {
        // independently evaluated (scalar arithmetic outside this crate)
        let c = CoefficientVector::reference_us(BenchmarkKind::IS);
        let p = link(&c, &Covariates::new(0.01, 25.0, 30.0, 10.0), BenchmarkKind::IS).unwrap();
        assert_abs_diff_eq!(p.mu, -9.513653528617073, epsilon = 1e-10);
        assert_abs_diff_eq!(p.sigma, 19.46398902650738, epsilon = 1e-10);
        assert_abs_diff_eq!(p.kappa, 1.2469724292082676, epsilon = 1e-12);
        assert_abs_diff_eq!(p.mean(), -18.175714110920875, epsilon = 1e-9);
    }

    #[test]
    fn doubling_size_scales_location() {
        let c = CoefficientVector::reference_us(BenchmarkKind::IS);
        let a = link(&c, &Covariates::new(0.01, 10.0, 30.0, 10.0), BenchmarkKind::IS).unwrap();
        let b = link(&c, &Covariates::new(0.02, 10.0, 30.0, 10.0), BenchmarkKind::IS).unwrap();
        assert_abs_diff_eq!(b.mu / a.mu, 2f64.powf(0.46), epsilon = 1e-12);
    }

    #[test]
    fn location_slope_is_exact() {
        let c = CoefficientVector::reference_us(BenchmarkKind::VWAP);
        let h: f64 = 1e-4;
        let at = |x1: f64| link(&c, &Covariates::new(x1, 10.0, 30.0, 10.0), BenchmarkKind::VWAP).unwrap().mu.abs().ln();
        let x1: f64 = 0.03;
        let slope = (at(x1 * h.exp()) - at(x1 * (-h).exp())) / (2.0 * h);
        assert_abs_diff_eq!(slope, c.beta[1], epsilon = 1e-8);
    }

    #[test]
    fn pwp_scale_symmetric_around_target() {
        let mut c = CoefficientVector::reference_us(BenchmarkKind::PWP20);
        c.gamma[2] = 0.0;
        for d in [1.0, 5.0, 12.5, 19.0] {
            let lo = link(&c, &Covariates::new(0.01, 20.0 - d, 30.0, 10.0), BenchmarkKind::PWP20).unwrap();
            let hi = link(&c, &Covariates::new(0.01, 20.0 + d, 30.0, 10.0), BenchmarkKind::PWP20).unwrap();
            assert_abs_diff_eq!(lo.sigma, hi.sigma, epsilon = 1e-12 * lo.sigma);
        }
        // X2 exactly at the target is fine
        assert!(link(&c, &Covariates::new(0.01, 20.0, 30.0, 10.0), BenchmarkKind::PWP20).is_ok());
    }

    #[test]
    fn link_rejects_bad_inputs() {
        let c = CoefficientVector::reference_us(BenchmarkKind::IS);
        assert!(matches!(
            link(&c, &Covariates::new(0.0, 10.0, 30.0, 10.0), BenchmarkKind::IS),
            Err(TcaError::InvalidCovariate { name: "x1", .. })
        ));
        assert!(matches!(
            link(&c, &Covariates::new(0.1, 10.0, 30.0, 10.0), BenchmarkKind::PWP20),
            Err(TcaError::SpecMismatch(_))
        ));
    }

    #[test]
    fn default_priors() {
        let p = PriorSpec::default_for(BenchmarkKind::PWP20);
        let get = |n: &str| p.entries.iter().find(|e| e.name == n).unwrap().clone();
        assert_eq!((get("beta0").mean, get("beta0").std), (0.0, 2.0));
        assert_eq!((get("beta3").mean, get("beta3").std), (0.5, 0.5));
        assert_eq!((get("gamma0").mean, get("gamma0").std), (0.0, 2.0));
        assert_eq!((get("gamma5").mean, get("gamma5").std), (0.5, 0.5));
        let g6 = get("gamma6");
        assert_eq!((g6.mean, g6.std, g6.truncated_at_zero), (1.0, 1.0, true));
        assert_eq!((get("alpha0").mean, get("alpha0").std), (-5.0, 2.0));
        assert_eq!((get("alpha2").mean, get("alpha2").std), (0.0, 0.5));
        assert_eq!(p.entries.len(), 15);
        assert_eq!(PriorSpec::default_for(BenchmarkKind::IS).entries.len(), 13);
        p.validate(BenchmarkKind::PWP20).unwrap();
        assert!(p.validate(BenchmarkKind::IS).is_err());
    }

    #[test]
    fn prior_mode_and_truncation() {
        let kind = BenchmarkKind::PWP20;
        let prior = PriorSpec::default_for(kind);
        let at_mode = CoefficientVector::from_flat(kind, &prior.means()).unwrap();
        let best = log_prior(&at_mode, &prior).unwrap();
        let mut other = at_mode.clone();
        other.beta[2] += 0.1;
        assert!(log_prior(&other, &prior).unwrap() < best);
        let mut trunc = at_mode.clone();
        trunc.gamma[6] = -0.1;
        assert_eq!(log_prior(&trunc, &prior).unwrap(), f64::NEG_INFINITY);
        let wrong = CoefficientVector::reference_us(BenchmarkKind::IS);
        assert!(matches!(log_prior(&wrong, &prior), Err(TcaError::SpecMismatch(_))));
    }

    #[test]
    fn posterior_additivity() {
        let kind = BenchmarkKind::IS;
        let prior = PriorSpec::default_for(kind);
        let c = CoefficientVector::reference_us(kind);
        let lp = log_prior(&c, &prior).unwrap();
        assert_eq!(log_posterior(&c, &[], &prior, kind).unwrap(), lp);
        let x = Covariates::new(0.01, 25.0, 30.0, 10.0);
        let one = log_posterior(&c, &[obs(kind, -12.0, x, "A")], &prior, kind).unwrap();
        assert_abs_diff_eq!(one, lp + link(&c, &x, kind).unwrap().log_pdf(-12.0).unwrap(), epsilon = 1e-12);
    }

    fn synthetic(kind: BenchmarkKind, n: usize) -> Vec<BenchmarkObservation> {
        (0..n)
            .map(|i| {
                let t = i as f64 / n as f64;
                let x = Covariates::new(0.001 + 0.19 * t, 1.0 + 39.0 * ((i * 7) % n) as f64 / n as f64, 10.0 + 70.0 * t * t, 2.0 + 48.0 * (1.0 - t));
                obs(kind, -40.0 + 80.0 * ((i * 13) % n) as f64 / n as f64, x, if i % 3 == 0 { "A" } else { "B" })
            })
            .collect()
    }

    #[test]
    fn cached_evaluator_matches_reference_route() {
        for kind in [BenchmarkKind::IS, BenchmarkKind::PWP20] {
            let data = synthetic(kind, 100);
            let prior = PriorSpec::default_for(kind);
            let target = GenericPosterior::new(kind, prior.clone(), &data).unwrap();
            let c = CoefficientVector::reference_us(kind);
            let reference = log_posterior(&c, &data, &prior, kind).unwrap();
            let mut theta = c.to_flat();
            assert_abs_diff_eq!(target.log_density(&theta), reference, epsilon = 1e-10 * reference.abs());

            let mut ev = target.evaluator();
            ev.reset(&prior.means());
            for b in 0..3 {
                let mut prop = prior.means();
                for (j, r) in target.blocks().iter().enumerate() {
                    if j <= b {
                        prop[r.clone()].copy_from_slice(&theta[r.clone()]);
                    }
                }
                let lp = ev.propose(&prop, b);
                assert_abs_diff_eq!(lp, target.log_density(&prop), epsilon = 1e-10 * lp.abs());
                ev.accept();
            }
            theta[1] += 0.2;
            let lp = ev.propose(&theta, 0);
            let c2 = CoefficientVector::from_flat(kind, &theta).unwrap();
            let reference = log_posterior(&c2, &data, &prior, kind).unwrap();
            assert_abs_diff_eq!(lp, reference, epsilon = 1e-10 * reference.abs());
        }
    }

    #[test]
    fn hierarchical_evaluator_matches_full_evaluation() {
        let kind = BenchmarkKind::IS;
        let data = synthetic(kind, 60);
        let mut prior = PriorSpec::default_for(kind);
        for e in &mut prior.entries {
            e.pooling = if e.name.starts_with("gamma") { CoefficientPooling::Shared } else { CoefficientPooling::PerAlgo };
        }
        let algos = vec!["A".to_string(), "B".to_string(), "C".to_string()];
        let target = HierarchicalPosterior::new(kind, &prior, &algos, &data).unwrap();
        assert_eq!(target.dim(), 5 + 3 * 8);
        assert_eq!(target.blocks().len(), 7);
        assert_eq!(target.param_names()[5], "beta0[A]");

        // full evaluation equals the sum of per-algorithm reference posteriors minus duplicated priors
        let mut theta = target.prior_means();
        theta[0] = 3.5;
        theta[5] = 0.7;
        theta[13 + 5] = -3.0;
        let full = target.log_density(&theta);
        let mut expected = target.flat_prior.log_density_flat(&theta);
        let mut buf = Vec::new();
        for (k, a) in algos.iter().enumerate() {
            target.algo_coefficients(&theta, k, &mut buf);
            let c = CoefficientVector::from_flat(kind, &buf).unwrap();
            let rows: Vec<_> = data.iter().filter(|o| &o.algo_id == a).cloned().collect();
            expected += log_posterior(&c, &rows, &prior, kind).unwrap() - log_prior(&c, &prior).unwrap();
        }
        assert_abs_diff_eq!(full, expected, epsilon = 1e-10 * full.abs());

        let mut ev = target.evaluator();
        ev.reset(&target.prior_means());
        let mut cur = target.prior_means();
        for (b, r) in target.blocks().into_iter().enumerate() {
            let mut prop = cur.clone();
            prop[r.clone()].copy_from_slice(&theta[r]);
            let lp = ev.propose(&prop, b);
            assert_abs_diff_eq!(lp, target.log_density(&prop), epsilon = 1e-10 * lp.abs());
            ev.accept();
            cur = prop;
        }
    }

    #[test]
    fn hierarchical_prior_from_draws() {
        let kind = BenchmarkKind::IS;
        let names = coefficient_names(kind);
        let draws: Vec<Vec<f64>> = (0..200).map(|i| vec![(i % 2) as f64; 13]).collect();
        let s = PosteriorSamples::from_draws(names.clone(), draws, vec![0; 200]);
        let p = hierarchical_prior_from_posterior(&s, kind).unwrap();
        assert_eq!(p.entries.len(), 13);
        assert_abs_diff_eq!(p.entries[0].mean, 0.5, epsilon = 1e-12);
        assert_eq!(p.entries[0].pooling, CoefficientPooling::PerAlgo);
        assert_eq!(p.entries[5].pooling, CoefficientPooling::Shared);
        assert_eq!(p.entries[12].pooling, CoefficientPooling::PerAlgo);

        let flat = vec![vec![0.25; 13]; 150];
        let p = hierarchical_prior_from_posterior(&PosteriorSamples::from_draws(names.clone(), flat, vec![0; 150]), kind).unwrap();
        assert_eq!(p.entries[3].mean, 0.25);
        assert_eq!(p.entries[3].std, MIN_PRIOR_STD);
        p.validate(kind).unwrap();

        let few = vec![vec![0.0; 13]; 99];
        assert!(matches!(
            hierarchical_prior_from_posterior(&PosteriorSamples::from_draws(names, few, vec![0; 99]), kind),
            Err(TcaError::InsufficientSamples { .. })
        ));

        let pwp = coefficient_names(BenchmarkKind::PWP20);
        let d = vec![vec![1.0; 15]; 100];
        let p = hierarchical_prior_from_posterior(&PosteriorSamples::from_draws(pwp, d, vec![0; 100]), BenchmarkKind::PWP20).unwrap();
        assert_eq!(p.entries.len(), 15);
        assert!(p.entries[11].truncated_at_zero);
    }
}
