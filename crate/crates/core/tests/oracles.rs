//! Library results against independent re-derivations written out here.

use bayes_tca::ald::AldParams;
use bayes_tca::benchmark::{BenchmarkKind, BenchmarkObservation};
use bayes_tca::cost::cost_posterior;
use bayes_tca::model::{
    coefficient_names, log_posterior, CoefficientVector, Covariates, GenericPosterior, HierarchicalPosterior, PriorSpec,
};
use bayes_tca::sampler::{posterior_predictive, run_chains, ChainConfig, LogDensity, PosteriorSamples};
use bayes_tca::synth::{generate, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ald_log_density(mu: f64, sigma: f64, kappa: f64, y: f64) -> f64 {
    let norm = -(sigma.ln()) - (kappa + 1.0 / kappa).ln();
    if y >= mu {
        norm - kappa * (y - mu) / sigma
    } else {
        norm - (mu - y) / (sigma * kappa)
    }
}

fn ald_cdf(mu: f64, sigma: f64, kappa: f64, y: f64) -> f64 {
    let k2 = kappa * kappa;
    if y < mu {
        k2 / (1.0 + k2) * ((y - mu) / (sigma * kappa)).exp()
    } else {
        1.0 - (-(kappa * (y - mu) / sigma)).exp() / (1.0 + k2)
    }
}

/// Location, scale, asymmetry from a flat coefficient vector, written out
/// term by term.
fn params(flat: &[f64], kind: BenchmarkKind, x: [f64; 4]) -> (f64, f64, f64) {
    let [l1, l2, l3, l4] = x.map(f64::ln);
    let mu = -(flat[0] + flat[1] * l1 + flat[2] * l2 + flat[3] * l3 + flat[4] * l4).exp();
    let mut s = flat[5] + flat[6] * l1 + flat[7] * l2 + flat[8] * l3 + flat[9] * l4;
    let a = if kind == BenchmarkKind::PWP20 {
        s += flat[10] * ((x[1] - 20.0).abs() + flat[11]).ln();
        12
    } else {
        10
    };
    let r = (flat[a] + flat[a + 1] * l1 + flat[a + 2] * l2).exp();
    let kappa = (r + (r * r + 4.0).sqrt()) / 2.0;
    (mu, s.exp(), kappa)
}

fn normal_log_density(v: f64, mean: f64, sd: f64) -> f64 {
    let z = (v - mean) / sd;
    -0.5 * (2.0 * std::f64::consts::PI).ln() - sd.ln() - 0.5 * z * z
}

fn brute_log_posterior(flat: &[f64], obs: &[BenchmarkObservation], prior: &PriorSpec, kind: BenchmarkKind) -> f64 {
    let mut total = 0.0;
    for (v, e) in flat.iter().zip(&prior.entries) {
        total += normal_log_density(*v, e.mean, e.std);
    }
    for o in obs {
        let (mu, sigma, kappa) = params(flat, kind, [o.x1, o.x2, o.x3, o.x4]);
        total += ald_log_density(mu, sigma, kappa, o.y);
    }
    total
}

fn jitter(base: &[f64], scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    base.iter().map(|v| v + scale * (rng.random::<f64>() - 0.5)).collect()
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs())
}

/// Composite Simpson rule on `[a, b]` with `n` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + h * i as f64);
    }
    s * h / 3.0
}

#[test]
fn density_integrates_to_one_with_closed_form_moments() {
    for kappa in [0.5, 1.0, 1.1, 2.0, 5.0] {
        let (mu, sigma) = (-5.0, 30.0);
        let p = AldParams::new(mu, sigma, kappa).unwrap();
        let lo = mu - 60.0 * sigma * kappa;
        let hi = mu + 60.0 * sigma / kappa;
        let pdf = |y: f64| p.pdf(y).unwrap();
        let n = 40_000;
        let mass = simpson(pdf, lo, mu, n) + simpson(pdf, mu, hi, n);
        let m1 = simpson(|y| y * pdf(y), lo, mu, n) + simpson(|y| y * pdf(y), mu, hi, n);
        let m2 = simpson(|y| (y - m1).powi(2) * pdf(y), lo, mu, n) + simpson(|y| (y - m1).powi(2) * pdf(y), mu, hi, n);
        assert!((mass - 1.0).abs() < 1e-6, "kappa {kappa}: mass {mass}");
        assert!((m1 - p.mean()).abs() < 1e-6 * sigma, "kappa {kappa}: {m1} vs {}", p.mean());
        assert!(close(m2, p.variance(), 1e-6), "kappa {kappa}: {m2} vs {}", p.variance());
    }
}

#[test]
fn log_pdf_matches_written_out_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1_000 {
        let mu = -50.0 * rng.random::<f64>();
        let sigma = 0.1 + 40.0 * rng.random::<f64>();
        let kappa = 0.2 + 5.0 * rng.random::<f64>();
        let y = mu + 200.0 * (rng.random::<f64>() - 0.5);
        let got = AldParams::new(mu, sigma, kappa).unwrap().log_pdf(y).unwrap();
        assert!(close(got, ald_log_density(mu, sigma, kappa, y), 1e-12));
    }
}

#[test]
fn log_posterior_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for kind in BenchmarkKind::ALL {
        let obs = generate(&SynthConfig::reference(kind, 100, 5)).unwrap();
        let prior = PriorSpec::default_for(kind);
        let target = GenericPosterior::new(kind, prior.clone(), &obs).unwrap();
        let base = CoefficientVector::reference_us(kind).to_flat();
        for _ in 0..20 {
            let flat = jitter(&base, 0.4, &mut rng);
            let want = brute_log_posterior(&flat, &obs, &prior, kind);
            let c = CoefficientVector::from_flat(kind, &flat).unwrap();
            let reference = log_posterior(&c, &obs, &prior, kind).unwrap();
            let cached = target.log_density(&flat);
            assert!(close(reference, want, 1e-10), "{kind}: {reference} vs {want}");
            assert!(close(cached, want, 1e-10), "{kind}: {cached} vs {want}");
        }
    }
}

#[test]
fn block_updates_track_full_evaluation() {
    let kind = BenchmarkKind::PWP20;
    let obs = generate(&SynthConfig::reference(kind, 300, 8)).unwrap();
    let target = GenericPosterior::new(kind, PriorSpec::default_for(kind), &obs).unwrap();
    let blocks = target.blocks();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut theta = CoefficientVector::reference_us(kind).to_flat();
    let mut ev = target.evaluator();
    assert!(close(ev.reset(&theta), target.log_density(&theta), 1e-12));
    for step in 0..200 {
        let b = step % blocks.len();
        let mut prop = theta.clone();
        for j in blocks[b].clone() {
            prop[j] += 0.05 * (rng.random::<f64>() - 0.5);
        }
        let lp = ev.propose(&prop, b);
        assert!(close(lp, target.log_density(&prop), 1e-9), "step {step}");
        if rng.random::<bool>() {
            ev.accept();
            theta = prop;
        }
    }
}

#[test]
fn hierarchical_density_matches_brute_force() {
    let kind = BenchmarkKind::IS;
    let mut cfg = SynthConfig::reference(kind, 60, 4);
    let mut other = cfg.algos[0].clone();
    other.algo_id = "ALGO2".into();
    other.coefficients.beta[0] += 0.5;
    cfg.algos.push(other);
    let obs = generate(&cfg).unwrap();
    let prior = PriorSpec::default_for(kind);
    let algos = vec!["ALGO1".to_string(), "ALGO2".to_string()];
    let target = HierarchicalPosterior::new(kind, &prior, &algos, &obs).unwrap();
    let names = target.param_names();
    assert_eq!(names[0], "gamma0");
    assert_eq!(names[5], "beta0[ALGO1]");
    assert_eq!(names[13], "beta0[ALGO2]");

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let base = target.prior_means();
    for _ in 0..20 {
        let theta = jitter(&base, 0.6, &mut rng);
        let mut want = 0.0;
        for (k, a) in algos.iter().enumerate() {
            let off = 5 + 8 * k;
            let flat: Vec<f64> = theta[off..off + 5].iter().chain(&theta[0..5]).chain(&theta[off + 5..off + 8]).copied().collect();
            let mine: Vec<BenchmarkObservation> = obs.iter().filter(|o| &o.algo_id == a).cloned().collect();
            want += brute_log_posterior(&flat, &mine, &PriorSpec { entries: vec![] }, kind);
            for j in (0..5).chain(10..13) {
                let e = &prior.entries[j];
                want += normal_log_density(flat[j], e.mean, e.std);
            }
        }
        for j in 0..5 {
            let e = &prior.entries[5 + j];
            want += normal_log_density(theta[j], e.mean, e.std);
        }
        assert!(close(target.log_density(&theta), want, 1e-10));
    }
}

fn spread_posterior(kind: BenchmarkKind, n: usize, seed: u64) -> PosteriorSamples {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = CoefficientVector::reference_us(kind).to_flat();
    let draws: Vec<Vec<f64>> = (0..n).map(|_| jitter(&base, 0.2, &mut rng)).collect();
    let chain = (0..n).map(|i| i % 2).collect::<Vec<_>>();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| chain[i]);
    PosteriorSamples::from_draws(
        coefficient_names(kind),
        order.iter().map(|&i| draws[i].clone()).collect(),
        order.iter().map(|&i| chain[i]).collect(),
    )
}

#[test]
fn cost_posterior_matches_per_draw_loop() {
    let x = Covariates::new(0.01, 25.0, 30.0, 10.0);
    for kind in BenchmarkKind::ALL {
        let post = spread_posterior(kind, 400, 9);
        let cost = cost_posterior(&post, kind, &x).unwrap();
        assert_eq!(cost.values.len(), 400);
        for (row, got) in post.draws.iter().zip(&cost.values) {
            let (mu, sigma, kappa) = params(row, kind, [x.x1, x.x2, x.x3, x.x4]);
            let want = mu + sigma * (1.0 / kappa - kappa);
            assert!(close(*got, want, 1e-12), "{kind}: {got} vs {want}");
        }
        let s = &cost.summary;
        assert!(s.q05 <= s.q25 && s.q25 <= s.q50 && s.q50 <= s.q75 && s.q75 <= s.q95);
        let mean = cost.values.iter().sum::<f64>() / 400.0;
        assert!(close(s.mean, mean, 1e-12));
    }
}

#[test]
fn predictive_follows_ald_distribution() {
    let kind = BenchmarkKind::IS;
    let c = CoefficientVector::reference_us(kind);
    let post = PosteriorSamples::from_draws(coefficient_names(kind), vec![c.to_flat()], vec![0]);
    let x = Covariates::new(0.02, 10.0, 30.0, 8.0);
    let ys = posterior_predictive(&post, kind, &[x], 100_000, 21).unwrap();
    let (mu, sigma, kappa) = params(&c.to_flat(), kind, [x.x1, x.x2, x.x3, x.x4]);
    let mut s = ys.clone();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let ks = s
        .iter()
        .enumerate()
        .map(|(i, y)| {
            let f = ald_cdf(mu, sigma, kappa, *y);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.02, "KS {ks}");
}

#[test]
fn predictive_variance_decomposes() {
    let kind = BenchmarkKind::VWAP;
    let post = spread_posterior(kind, 400, 13);
    let x = Covariates::new(0.05, 20.0, 25.0, 6.0);
    let ys = posterior_predictive(&post, kind, &[x], 500, 4).unwrap();
    let moments: Vec<(f64, f64)> = post
        .draws
        .iter()
        .map(|r| {
            let (mu, sigma, kappa) = params(r, kind, [x.x1, x.x2, x.x3, x.x4]);
            (mu + sigma * (1.0 / kappa - kappa), sigma * sigma * (1.0 + kappa.powi(4)) / (kappa * kappa))
        })
        .collect();
    let m = moments.len() as f64;
    let mean_of_means = moments.iter().map(|p| p.0).sum::<f64>() / m;
    let within = moments.iter().map(|p| p.1).sum::<f64>() / m;
    let between = moments.iter().map(|p| (p.0 - mean_of_means).powi(2)).sum::<f64>() / m;
    let n = ys.len() as f64;
    let ym = ys.iter().sum::<f64>() / n;
    let yv = ys.iter().map(|y| (y - ym).powi(2)).sum::<f64>() / n;
    assert!(close(yv, within + between, 0.03), "{yv} vs {}", within + between);
    assert!((ym - mean_of_means).abs() < 4.0 * (yv / n).sqrt());
}

#[test]
fn prior_only_run_reproduces_prior() {
    let kind = BenchmarkKind::IS;
    let prior = PriorSpec::default_for(kind);
    let target = HierarchicalPosterior::new(kind, &prior, &["A".to_string()], &[]).unwrap();
    let cfg = ChainConfig { n_iter: 60_000, n_burn: 10_000, thinning: 5, n_chains: 4, seed: 12, ..ChainConfig::default() };
    let s = run_chains(&target, &target.prior_means(), &cfg).unwrap();
    let b0 = s.summary.iter().find(|c| c.name == "beta0[A]").unwrap();
    assert!(b0.mean.abs() < 0.1, "{b0:?}");
    assert!((b0.std - 2.0).abs() < 0.2, "{b0:?}");
    let g1 = s.summary.iter().find(|c| c.name == "gamma1").unwrap();
    assert!((g1.mean - 0.5).abs() < 0.05 && (g1.std - 0.5).abs() < 0.05, "{g1:?}");
}
