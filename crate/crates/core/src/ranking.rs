//! Algorithm ranking: a relevance score from Mahalanobis distances between
//! the query order/stock and each algorithm's history, a performance score
//! from bounded z-scores of posterior expected costs, and their weighted
//! total. Also the probabilistic algo wheel.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::benchmark::BenchmarkKind;
use crate::cost::{sample_cost_with, CostPosterior};
use crate::error::{Result, TcaError};
use crate::model::Covariates;
use crate::stats::z_scores;

pub type Vec2 = [f64; 2];
pub type Mat2 = [[f64; 2]; 2];

/// Variance floor added to fitted covariances (log-space units).
pub const COVARIANCE_FLOOR: f64 = 1e-4;
pub const MIN_HISTORY: usize = 10;
pub const DEFAULT_K_MAX: usize = 4;
/// Best k >= 2 must reach this mean silhouette to beat a single cluster.
const SILHOUETTE_MIN: f64 = 0.6;
const SILHOUETTE_MAX_POINTS: usize = 1_000;
/// Share of algorithms kept by relevance.
pub const RELEVANT_SHARE: f64 = 0.2;

/// Bounded z-score `100 tanh(z)`.
pub fn z_range(z: f64) -> f64 {
    // adding 0.0 turns -0.0 into 0.0
    100.0 * z.tanh() + 0.0
}

/// Mahalanobis distance of `point` from a 2-D distribution. The covariance is
/// regularized by `1e-8 * trace` on the diagonal.
pub fn mahalanobis(point: Vec2, mean: Vec2, cov: Mat2) -> Result<f64> {
    let eps = 1e-8 * (cov[0][0] + cov[1][1]);
    let a = cov[0][0] + eps;
    let d = cov[1][1] + eps;
    let b = 0.5 * (cov[0][1] + cov[1][0]);
    let det = a * d - b * b;
    if !(det > 0.0) || !det.is_finite() || !(a > 0.0) {
        return Err(TcaError::DegenerateDistribution);
    }
    let (dx, dy) = (point[0] - mean[0], point[1] - mean[1]);
    let q = (d * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
    Ok(q.max(0.0).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian2 {
    pub mean: Vec2,
    pub cov: Mat2,
}

impl Gaussian2 {
    pub fn distance(&self, point: Vec2) -> Result<f64> {
        mahalanobis(point, self.mean, self.cov)
    }

    fn fit(points: &[Vec2]) -> Self {
        let n = points.len() as f64;
        let mean = [points.iter().map(|p| p[0]).sum::<f64>() / n, points.iter().map(|p| p[1]).sum::<f64>() / n];
        let mut cov = [[0.0; 2]; 2];
        if points.len() > 1 {
            for p in points {
                let d = [p[0] - mean[0], p[1] - mean[1]];
                for i in 0..2 {
                    for j in 0..2 {
                        cov[i][j] += d[i] * d[j] / (n - 1.0);
                    }
                }
            }
        }
        cov[0][0] += COVARIANCE_FLOOR;
        cov[1][1] += COVARIANCE_FLOOR;
        Self { mean, cov }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderCluster {
    #[serde(flatten)]
    pub dist: Gaussian2,
    pub count: usize,
}

/// Historical order/stock footprint of one algorithm: order clusters over
/// `(ln X1, ln X2)`, a single stock distribution over `(ln X3, ln X4)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoricalProfile {
    pub algo_id: String,
    pub clusters: Vec<OrderCluster>,
    pub stock: Gaussian2,
    pub n_observations: usize,
}

pub fn order_point(x: &Covariates) -> Vec2 {
    [x.x1.ln(), x.x2.ln()]
}

pub fn stock_point(x: &Covariates) -> Vec2 {
    [x.x3.ln(), x.x4.ln()]
}

impl HistoricalProfile {
    /// Distance to the nearest order cluster.
    pub fn order_distance(&self, x: &Covariates) -> Result<f64> {
        let p = order_point(x);
        self.clusters
            .iter()
            .map(|c| c.dist.distance(p))
            .try_fold(f64::INFINITY, |best, d| d.map(|d| best.min(d)))
    }

    pub fn stock_distance(&self, x: &Covariates) -> Result<f64> {
        self.stock.distance(stock_point(x))
    }
}

fn sq_dist(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Lloyd's k-means with deterministic farthest-first initialization.
fn kmeans(points: &[Vec2], k: usize) -> Vec<usize> {
    let n = points.len() as f64;
    let centroid = [points.iter().map(|p| p[0]).sum::<f64>() / n, points.iter().map(|p| p[1]).sum::<f64>() / n];
    let first = (0..points.len())
        .min_by(|&a, &b| sq_dist(points[a], centroid).total_cmp(&sq_dist(points[b], centroid)))
        .expect("non-empty");
    let mut centers = vec![points[first]];
    while centers.len() < k {
        let far = (0..points.len())
            .max_by(|&a, &b| {
                let da = centers.iter().map(|c| sq_dist(points[a], *c)).fold(f64::INFINITY, f64::min);
                let db = centers.iter().map(|c| sq_dist(points[b], *c)).fold(f64::INFINITY, f64::min);
                da.total_cmp(&db)
            })
            .expect("non-empty");
        centers.push(points[far]);
    }
    let nearest = |p: Vec2, centers: &[Vec2]| {
        (0..centers.len()).min_by(|&a, &b| sq_dist(p, centers[a]).total_cmp(&sq_dist(p, centers[b]))).expect("k >= 1")
    };
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(*p, &centers)).collect();
    for _ in 0..100 {
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec2> = points.iter().zip(&labels).filter(|(_, l)| **l == c).map(|(p, _)| p).collect();
            if !members.is_empty() {
                let m = members.len() as f64;
                *center = [members.iter().map(|p| p[0]).sum::<f64>() / m, members.iter().map(|p| p[1]).sum::<f64>() / m];
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(*p, &centers)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    labels
}

/// Mean silhouette over at most `SILHOUETTE_MAX_POINTS` evenly strided points.
fn silhouette(points: &[Vec2], labels: &[usize], k: usize) -> f64 {
    let stride = points.len().div_ceil(SILHOUETTE_MAX_POINTS).max(1);
    let idx: Vec<usize> = (0..points.len()).step_by(stride).collect();
    let mut total = 0.0;
    for &i in &idx {
        let mut sum = vec![0.0; k];
        let mut cnt = vec![0usize; k];
        for &j in &idx {
            if i != j {
                sum[labels[j]] += sq_dist(points[i], points[j]).sqrt();
                cnt[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if cnt[own] == 0 {
            continue;
        }
        let a = sum[own] / cnt[own] as f64;
        let b = (0..k).filter(|&c| c != own && cnt[c] > 0).map(|c| sum[c] / cnt[c] as f64).fold(f64::INFINITY, f64::min);
        if b.is_finite() && a.max(b) > 0.0 {
            total += (b - a) / a.max(b);
        }
    }
    total / idx.len() as f64
}

/// Cluster an algorithm's order history and fit its stock distribution. The
/// number of order clusters is chosen in `1..=k_max` by silhouette.
pub fn fit_profile(algo_id: &str, history: &[Covariates], k_max: usize) -> Result<HistoricalProfile> {
    if history.len() < MIN_HISTORY {
        return Err(TcaError::InsufficientHistory { algo: algo_id.to_string(), n: history.len(), needed: MIN_HISTORY });
    }
    for x in history {
        x.validate()?;
    }
    let orders: Vec<Vec2> = history.iter().map(order_point).collect();
    let stocks: Vec<Vec2> = history.iter().map(stock_point).collect();

    let mut labels = vec![0usize; orders.len()];
    let mut k = 1;
    let mut best = SILHOUETTE_MIN;
    for cand in 2..=k_max.min(orders.len() / 2) {
        let l = kmeans(&orders, cand);
        let s = silhouette(&orders, &l, cand);
        if s > best {
            best = s;
            labels = l;
            k = cand;
        }
    }
    let clusters = (0..k)
        .filter_map(|c| {
            let members: Vec<Vec2> = orders.iter().zip(&labels).filter(|(_, l)| **l == c).map(|(p, _)| *p).collect();
            (!members.is_empty()).then(|| OrderCluster { dist: Gaussian2::fit(&members), count: members.len() })
        })
        .collect();
    Ok(HistoricalProfile { algo_id: algo_id.to_string(), clusters, stock: Gaussian2::fit(&stocks), n_observations: history.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkWeights {
    #[serde(rename = "IS")]
    pub is: f64,
    #[serde(rename = "VWAP")]
    pub vwap: f64,
    #[serde(rename = "PWP20")]
    pub pwp20: f64,
    #[serde(rename = "Rev5m")]
    pub rev5m: f64,
}

impl BenchmarkWeights {
    pub fn get(&self, kind: BenchmarkKind) -> f64 {
        match kind {
            BenchmarkKind::IS => self.is,
            BenchmarkKind::VWAP => self.vwap,
            BenchmarkKind::PWP20 => self.pwp20,
            BenchmarkKind::Rev5m => self.rev5m,
        }
    }

    /// Weights rescaled to sum to one.
    pub fn normalized(&self) -> Result<Self> {
        let all = [self.is, self.vwap, self.pwp20, self.rev5m];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(TcaError::Config("benchmark weights must be non-negative".into()));
        }
        let s: f64 = all.iter().sum();
        if !(s > 0.0) {
            return Err(TcaError::Config("benchmark weights sum to zero".into()));
        }
        Ok(Self { is: self.is / s, vwap: self.vwap / s, pwp20: self.pwp20 / s, rev5m: self.rev5m / s })
    }

    /// Benchmark with the largest weight (first in IS, VWAP, PWP20, Rev5m order on ties).
    pub fn primary(&self) -> BenchmarkKind {
        BenchmarkKind::ALL.into_iter().fold(BenchmarkKind::IS, |best, k| if self.get(k) > self.get(best) { k } else { best })
    }
}

impl Default for BenchmarkWeights {
    fn default() -> Self {
        Self { is: 0.25, vwap: 0.25, pwp20: 0.25, rev5m: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankingWeights {
    pub w_order: f64,
    pub w_stock: f64,
    pub w_r: f64,
    pub w_p: f64,
    pub benchmark_weights: BenchmarkWeights,
}

impl Default for RankingWeights {
    fn default() -> Self {
        Self { w_order: 2.0 / 3.0, w_stock: 1.0 / 3.0, w_r: 0.3, w_p: 0.7, benchmark_weights: BenchmarkWeights::default() }
    }
}

impl RankingWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, w) in [("w_order", self.w_order), ("w_stock", self.w_stock), ("w_r", self.w_r), ("w_p", self.w_p)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(TcaError::Config(format!("{n} must be non-negative")));
            }
        }
        self.benchmark_weights.normalized().map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Relevance {
    pub d_order: f64,
    pub d_stock: f64,
    pub score: f64,
}

/// Relevance of each profile for the query order: distances are z-scored
/// across the candidate set and negated so that closer history scores
/// higher.
pub fn relevance_scores(x: &Covariates, profiles: &[HistoricalProfile], w_order: f64, w_stock: f64) -> Result<Vec<Relevance>> {
    if profiles.len() < 2 {
        return Err(TcaError::CannotStandardize(profiles.len()));
    }
    x.validate()?;
    let d_order = profiles.iter().map(|p| p.order_distance(x)).collect::<Result<Vec<_>>>()?;
    let d_stock = profiles.iter().map(|p| p.stock_distance(x)).collect::<Result<Vec<_>>>()?;
    let zo = z_scores(&d_order);
    let zs = z_scores(&d_stock);
    Ok((0..profiles.len())
        .map(|i| Relevance {
            d_order: d_order[i],
            d_stock: d_stock[i],
            score: w_order * z_range(-zo[i]) + w_stock * z_range(-zs[i]),
        })
        .collect())
}

/// Posterior-mean expected cost of one algorithm per benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgoCosts {
    pub algo_id: String,
    pub expected: BTreeMap<BenchmarkKind, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Performance {
    pub score: f64,
    pub bounded_z: BTreeMap<BenchmarkKind, f64>,
}

/// Weighted sum of bounded z-scores of expected costs, standardized across
/// algorithms per benchmark. Higher expected value (smaller cost) is better.
pub fn performance_scores(costs: &[AlgoCosts], weights: &BenchmarkWeights) -> Result<Vec<Performance>> {
    if costs.len() < 2 {
        return Err(TcaError::CannotStandardize(costs.len()));
    }
    let w = weights.normalized()?;
    let mut out: Vec<Performance> = costs.iter().map(|_| Performance { score: 0.0, bounded_z: BTreeMap::new() }).collect();
    for kind in BenchmarkKind::ALL {
        if w.get(kind) == 0.0 {
            continue;
        }
        let values = costs
            .iter()
            .map(|c| {
                c.expected.get(&kind).copied().ok_or_else(|| {
                    TcaError::Config(format!("no {kind} cost for algorithm '{}' but {kind} has weight", c.algo_id))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        for (p, z) in out.iter_mut().zip(z_scores(&values)) {
            let bounded = z_range(z);
            p.bounded_z.insert(kind, bounded);
            p.score += w.get(kind) * bounded;
        }
    }
    Ok(out)
}

pub fn total_score(relevance: f64, performance: f64, w_r: f64, w_p: f64) -> f64 {
    w_r * relevance + w_p * performance
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCard {
    pub algo_id: String,
    pub relevance: f64,
    pub performance: f64,
    pub total: f64,
    pub bounded_z: BTreeMap<BenchmarkKind, f64>,
    pub d_order: f64,
    pub d_stock: f64,
    pub n_observations: usize,
    pub included: bool,
}

fn by_relevance(a: &ScoreCard, b: &ScoreCard) -> Ordering {
    b.relevance
        .total_cmp(&a.relevance)
        .then(b.n_observations.cmp(&a.n_observations))
        .then_with(|| a.algo_id.cmp(&b.algo_id))
}

/// Ids of the top `ceil(0.2 N)` cards by relevance (never empty for N >= 1).
/// Ties go to more history, then to the smaller id.
pub fn select_relevant(cards: &[ScoreCard]) -> Vec<String> {
    let keep = ((RELEVANT_SHARE * cards.len() as f64).ceil() as usize).max(1).min(cards.len());
    let mut sorted: Vec<&ScoreCard> = cards.iter().collect();
    sorted.sort_by(|a, b| by_relevance(a, b));
    sorted.into_iter().take(keep).map(|c| c.algo_id.clone()).collect()
}

/// Score and order algorithms for one query order. `profiles[i]` and
/// `costs[i]` must describe the same algorithm. Output: included cards by
/// descending total, then the excluded ones.
pub fn rank_algorithms(x: &Covariates, profiles: &[HistoricalProfile], costs: &[AlgoCosts], weights: &RankingWeights) -> Result<Vec<ScoreCard>> {
    weights.validate()?;
    if profiles.is_empty() || profiles.len() != costs.len() {
        return Err(TcaError::Config(format!("{} profiles for {} cost sets", profiles.len(), costs.len())));
    }
    for (p, c) in profiles.iter().zip(costs) {
        if p.algo_id != c.algo_id {
            return Err(TcaError::Config(format!("profile '{}' paired with costs of '{}'", p.algo_id, c.algo_id)));
        }
    }
    let mut cards: Vec<ScoreCard> = if profiles.len() == 1 {
        // nothing to standardize against
        let p = &profiles[0];
        vec![ScoreCard {
            algo_id: p.algo_id.clone(),
            relevance: 0.0,
            performance: 0.0,
            total: 0.0,
            bounded_z: BTreeMap::new(),
            d_order: p.order_distance(x)?,
            d_stock: p.stock_distance(x)?,
            n_observations: p.n_observations,
            included: true,
        }]
    } else {
        let rel = relevance_scores(x, profiles, weights.w_order, weights.w_stock)?;
        let perf = performance_scores(costs, &weights.benchmark_weights)?;
        profiles
            .iter()
            .zip(rel)
            .zip(perf)
            .map(|((p, r), pf)| ScoreCard {
                algo_id: p.algo_id.clone(),
                relevance: r.score,
                performance: pf.score,
                total: total_score(r.score, pf.score, weights.w_r, weights.w_p),
                bounded_z: pf.bounded_z,
                d_order: r.d_order,
                d_stock: r.d_stock,
                n_observations: p.n_observations,
                included: false,
            })
            .collect()
    };
    let kept = select_relevant(&cards);
    for c in &mut cards {
        c.included = kept.contains(&c.algo_id);
    }
    cards.sort_by(|a, b| {
        b.included
            .cmp(&a.included)
            .then(b.total.total_cmp(&a.total))
            .then(b.n_observations.cmp(&a.n_observations))
            .then_with(|| a.algo_id.cmp(&b.algo_id))
    });
    Ok(cards)
}

/// One routing decision: draw one expected cost per algorithm and pick the
/// highest (least costly). Earlier entries win exact ties.
pub fn algo_wheel(posteriors: &[(String, CostPosterior)], seed: u64) -> Result<String> {
    if posteriors.is_empty() {
        return Err(TcaError::InvalidInput("algo wheel needs at least one algorithm".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, f64)> = None;
    for (i, (_, cost)) in posteriors.iter().enumerate() {
        let v = sample_cost_with(cost, &mut rng);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    Ok(posteriors[best.expect("non-empty").0].0.clone())
}
