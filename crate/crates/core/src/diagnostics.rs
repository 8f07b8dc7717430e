//! Multi-chain convergence diagnostics: rank-normalized split-R-hat and
//! effective sample size.

use statrs::distribution::{ContinuousCDF, Normal};

/// Rank-normalized split-R-hat, the larger of the bulk and folded (tail)
/// versions. `chains` holds one slice of draws per chain.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let halves = split_halves(chains);
    if halves.is_empty() || halves[0].len() < 2 {
        return f64::NAN;
    }
    let bulk = classic_rhat(&rank_normalize(&halves));
    let all: Vec<f64> = halves.iter().flatten().copied().collect();
    let med = crate::stats::quantile_sorted(&crate::stats::sorted(&all), 0.5);
    let folded: Vec<Vec<f64>> = halves.iter().map(|c| c.iter().map(|x| (x - med).abs()).collect()).collect();
    let tail = classic_rhat(&rank_normalize(&folded));
    bulk.max(tail)
}

fn split_halves(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let half = n / 2;
    if half == 0 {
        return Vec::new();
    }
    chains
        .iter()
        .flat_map(|c| [c[..half].to_vec(), c[n - half..n].to_vec()])
        .collect()
}

/// Replace each draw by the normal score of its fractional rank across all
/// chains (average rank for ties).
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut idx: Vec<(f64, usize, usize)> = chains
        .iter()
        .enumerate()
        .flat_map(|(c, v)| v.iter().enumerate().map(move |(i, x)| (*x, c, i)))
        .collect();
    idx.sort_by(|a, b| a.0.total_cmp(&b.0));
    let s = idx.len() as f64;
    let normal = Normal::standard();
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end + 1 < idx.len() && idx[end + 1].0 == idx[start].0 {
            end += 1;
        }
        // 1-based average rank of the tie group
        let rank = (start + end) as f64 / 2.0 + 1.0;
        let z = normal.inverse_cdf((rank - 0.375) / (s + 0.25));
        for &(_, c, i) in &idx[start..=end] {
            out[c][i] = z;
        }
        start = end + 1;
    }
    out
}

fn chain_moments(chains: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    chains
        .iter()
        .map(|c| {
            let (m, s) = crate::stats::mean_std(c);
            (m, s * s)
        })
        .unzip()
}

fn classic_rhat(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let n = chains[0].len() as f64;
    let (means, vars) = chain_moments(chains);
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = vars.iter().sum::<f64>() / m;
    if !(w > 0.0) {
        return if b > 0.0 { f64::INFINITY } else { 1.0 };
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

/// Multi-chain effective sample size. The autocorrelation sum is truncated
/// at the first lag pair whose sum is not positive.
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if m == 0 || n < 4 {
        return f64::NAN;
    }
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let (means, vars) = {
        let owned: Vec<Vec<f64>> = chains.iter().map(|c| c.to_vec()).collect();
        chain_moments(&owned)
    };
    let nf = n as f64;
    let w = vars.iter().sum::<f64>() / m as f64;
    let grand = means.iter().sum::<f64>() / m as f64;
    let b = if m > 1 {
        nf / (m as f64 - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>()
    } else {
        0.0
    };
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    if !(var_plus > 0.0) {
        return (m * n) as f64;
    }
    let acov = |lag: usize| -> f64 {
        chains
            .iter()
            .zip(&means)
            .map(|(c, mu)| (0..n - lag).map(|i| (c[i] - mu) * (c[i + lag] - mu)).sum::<f64>() / nf)
            .sum::<f64>()
            / m as f64
    };
    let rho = |lag: usize| 1.0 - (w - acov(lag)) / var_plus;
    let mut tau = -1.0;
    let mut lag = 0;
    let mut prev_pair = f64::INFINITY;
    while lag + 1 < n {
        let mut pair = rho(lag) + rho(lag + 1);
        if pair <= 0.0 {
            break;
        }
        // keep the pair sums monotone
        pair = pair.min(prev_pair);
        prev_pair = pair;
        tau += 2.0 * pair;
        lag += 2;
    }
    let total = (m * n) as f64;
    total / tau.max(1.0 / total.log10())
}
