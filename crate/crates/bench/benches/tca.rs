use std::hint::black_box;

use bayes_tca::ald::AldParams;
use bayes_tca::benchmark::{compute_observations, ExecutionRecord, Fill, Side, TapeTrade};
use bayes_tca::model::{log_posterior, CoefficientVector, GenericPosterior, PriorSpec};
use bayes_tca::sampler::LogDensity;
use bayes_tca::{generate, BenchmarkKind, SynthConfig};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

fn ald(c: &mut Criterion) {
    let p = AldParams::new(-5.0, 30.0, 1.1).unwrap();
    c.bench_function("ald_log_pdf", |b| b.iter(|| p.log_pdf(black_box(-12.5)).unwrap()));
}

fn likelihood(c: &mut Criterion) {
    let kind = BenchmarkKind::IS;
    let obs = generate(&SynthConfig::reference(kind, 20_000, 1)).unwrap();
    let prior = PriorSpec::default_for(kind);
    let coeffs = CoefficientVector::reference_us(kind);
    let flat = coeffs.to_flat();
    let target = GenericPosterior::new(kind, prior.clone(), &obs).unwrap();

    let mut g = c.benchmark_group("log_posterior_20k");
    g.sample_size(20);
    g.bench_function("reference", |b| b.iter(|| log_posterior(&coeffs, &obs, &prior, kind).unwrap()));
    g.bench_function("cached_full", |b| b.iter(|| target.log_density(black_box(&flat))));
    g.bench_function("cached_block", |b| {
        b.iter_batched_ref(
            || {
                let mut ev = target.evaluator();
                ev.reset(&flat);
                ev
            },
            |ev| {
                let mut prop = flat.clone();
                prop[0] += 0.01;
                ev.propose(&prop, 0)
            },
            BatchSize::SmallInput,
        )
    });
    g.finish();
}

fn benchmarks(c: &mut Criterion) {
    let fills: Vec<Fill> = (0..20)
        .map(|i| Fill { timestamp_ms: i * 30_000, price: 100.0 + (i % 5) as f64 * 0.1, quantity: 50.0 })
        .collect();
    let tape: Vec<TapeTrade> = (0..2_000)
        .map(|i| TapeTrade { timestamp_ms: i * 600, price: 100.0 + (i % 13) as f64 * 0.05, volume: 100.0 })
        .collect();
    let record = ExecutionRecord {
        order_id: "B1".into(),
        algo_id: "ALG".into(),
        symbol: None,
        side: Side::Buy,
        arrival_price: 99.9,
        start_time_ms: 0,
        end_time_ms: 600_000,
        fills,
        size_shares: 1_000.0,
        adv_shares: 100_000.0,
        participation_rate_pct: 10.0,
        volatility_pct: 30.0,
        spread_bps: 5.0,
    };
    c.bench_function("compute_observations", |b| b.iter(|| compute_observations(black_box(&record), &tape)));
}

criterion_group!(benches, ald, likelihood, benchmarks);
criterion_main!(benches);
