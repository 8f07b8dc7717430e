//! Small descriptive-statistics helpers shared across modules.

use serde::{Deserialize, Deserializer, Serialize};

/// Mean and sample standard deviation (n - 1). Constant input (including a
/// single value) gives exactly that value and std 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    if xs.iter().all(|x| *x == xs[0]) {
        return (xs[0], 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let ss = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
    (mean, (ss / (n - 1) as f64).sqrt())
}

pub fn variance(xs: &[f64]) -> f64 {
    let (_, s) = mean_std(xs);
    s * s
}

/// Quantile by linear interpolation between order statistics of a sorted
/// slice (`h = (n - 1) q`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `edges.len() == counts.len() + 1`.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Histogram with Freedman-Diaconis bin width `2 IQR n^{-1/3}`. Falls back
/// to a single bin when the sample has no spread.
pub fn histogram_fd(xs: &[f64]) -> Histogram {
    if xs.is_empty() {
        return Histogram { edges: vec![], counts: vec![] };
    }
    let s = sorted(xs);
    let (min, max) = (s[0], s[s.len() - 1]);
    let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
    let width = 2.0 * iqr / (s.len() as f64).cbrt();
    let bins = if width > 0.0 && max > min {
        (((max - min) / width).ceil() as usize).clamp(1, 10_000)
    } else {
        1
    };
    let step = if max > min { (max - min) / bins as f64 } else { 1.0 };
    let edges: Vec<f64> = (0..=bins).map(|i| if i == bins && max > min { max } else { min + step * i as f64 }).collect();
    let mut counts = vec![0u64; bins];
    for x in &s {
        let i = (((x - min) / step) as usize).min(bins - 1);
        counts[i] += 1;
    }
    Histogram { edges, counts }
}

/// Two-sample Kolmogorov-Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let a = sorted(a);
    let b = sorted(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Population z-scores; all zero when the values have no spread.
pub fn z_scores(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd > 1e-12 * mean.abs().max(1.0)) {
        return vec![0.0; xs.len()];
    }
    xs.iter().map(|x| (x - mean) / sd).collect()
}

/// JSON has no NaN; serializers write `null`. Read it back as NaN.
pub fn nan_from_null<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}
