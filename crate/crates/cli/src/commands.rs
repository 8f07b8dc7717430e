use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use bayes_tca::benchmark::{correlation_matrices, default_buckets, group_by_order, ParticipationBucket};
use bayes_tca::io::{self, tape_for};
use bayes_tca::model::{n_coefficients, CoefficientPooling};
use bayes_tca::ranking::{fit_profile, rank_algorithms, AlgoCosts, HistoricalProfile, DEFAULT_K_MAX};
use bayes_tca::sampler::CoefficientSummary;
use bayes_tca::stats::{histogram_fd, nan_from_null, Histogram};
use bayes_tca::{
    algo_wheel, apply_filters, compute_observations, cost_posterior, generate, run_mh, BenchmarkKind, BenchmarkObservation,
    ChainConfig, CostPosterior, CostSummary, Covariates, FilterConfig, ModelSpec, Pooling, PosteriorSamples, PriorSpec,
    RankingWeights, ScoreCard, SynthConfig, TcaError,
};
use serde::{Deserialize, Serialize};

use crate::{open_data, read_json_config, CliError, CliResult, Common, Outcome, RunManifest, Stage};

fn prepare_out_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn create(dir: &Path, name: &str) -> CliResult<BufWriter<File>> {
    let path = dir.join(name);
    File::create(&path).map(BufWriter::new).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> CliResult<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Data(e.to_string()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| CliError::Data(e.to_string()))
}

fn finish(manifest: RunManifest, common: &Common, files: &[&str]) -> CliResult<Outcome> {
    let files: Vec<String> = files.iter().map(|s| s.to_string()).collect();
    let files = manifest.finish(&common.out_dir, &files)?;
    Ok(Outcome { out_dir: common.out_dir.clone(), files })
}

fn read_observation_file(path: &Path) -> CliResult<Vec<BenchmarkObservation>> {
    let (obs, rejects) = io::read_observations(open_data(path)?)?;
    for r in &rejects {
        eprintln!("warning: {}:{}: {}", path.display(), r.line, r.reason);
    }
    Ok(obs)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarksConfig {
    pub filters: FilterConfig,
    /// Participation buckets for correlations; defaults to 1-7, 7-15, 15-25, 25-40 %.
    pub buckets: Option<Vec<ParticipationBucket>>,
}

impl BenchmarksConfig {
    fn load(path: Option<&Path>) -> CliResult<Self> {
        let cfg: Self = match path {
            Some(p) => read_json_config(p)?,
            None => Self::default(),
        };
        for b in cfg.buckets.iter().flatten() {
            if !(b.lo < b.hi) {
                return Err(CliError::Config(format!("bucket [{}, {}] is empty", b.lo, b.hi)));
            }
        }
        Ok(cfg)
    }

    fn buckets(&self) -> Vec<ParticipationBucket> {
        self.buckets.clone().unwrap_or_else(default_buckets)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BucketCorrelation {
    pub lo: f64,
    pub hi: f64,
    pub n_orders: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matrix: Option<[[f64; 4]; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub benchmarks: Vec<BenchmarkKind>,
    pub buckets: Vec<BucketCorrelation>,
}

fn correlation_report(observations: &[BenchmarkObservation], buckets: &[ParticipationBucket]) -> CorrelationReport {
    let orders = group_by_order(observations);
    let buckets = correlation_matrices(&orders, buckets)
        .into_iter()
        .zip(buckets)
        .map(|(r, b)| match r {
            Ok(m) => BucketCorrelation { lo: b.lo, hi: b.hi, n_orders: m.n_orders, matrix: Some(m.matrix), error: None },
            Err(e) => {
                let n = match &e {
                    TcaError::BucketTooSmall { n, .. } => *n,
                    _ => 0,
                };
                BucketCorrelation { lo: b.lo, hi: b.hi, n_orders: n, matrix: None, error: Some(e.to_string()) }
            }
        })
        .collect();
    CorrelationReport { benchmarks: BenchmarkKind::ALL.to_vec(), buckets }
}

pub fn benchmarks(common: &Common, executions: &Path, tape: &Path) -> CliResult<Outcome> {
    let cfg = BenchmarksConfig::load(common.config.as_deref())?;
    let manifest = RunManifest::start("benchmarks", common.config.as_deref(), &[executions, tape], common.seed);
    let (orders, exec_rejects) = io::read_executions(open_data(executions)?)?;
    let (book, tape_rejects) = io::read_tape(open_data(tape)?)?;
    prepare_out_dir(&common.out_dir)?;

    let mut rejects: Vec<(String, Option<u64>, String)> = Vec::new();
    rejects.extend(exec_rejects.into_iter().map(|r| ("executions".to_string(), Some(r.line), r.reason)));
    rejects.extend(tape_rejects.into_iter().map(|r| ("tape".to_string(), Some(r.line), r.reason)));
    if orders.is_empty() {
        eprintln!("warning: no valid orders in {}", executions.display());
    }
    let mut all = Vec::new();
    for order in &orders {
        let (obs, failed) = compute_observations(order, tape_for(order, &book).unwrap_or(&[]));
        all.extend(obs);
        for (kind, e) in failed {
            rejects.push((format!("benchmark {kind}"), None, format!("order {}: {e}", order.order_id)));
        }
    }
    let kept = apply_filters(&all, &cfg.filters);
    io::write_observations(create(&common.out_dir, "observations.csv")?, &kept)?;
    io::write_rejects(create(&common.out_dir, "rejects.csv")?, &rejects)?;
    write_json(&common.out_dir, "correlations.json", &correlation_report(&kept, &cfg.buckets()))?;
    println!("{} orders, {} observations ({} after filters), {} rejects", orders.len(), all.len(), kept.len(), rejects.len());
    finish(manifest, common, &["observations.csv", "rejects.csv", "correlations.json"])
}

pub fn correlations(common: &Common, observations: &Path) -> CliResult<Outcome> {
    let cfg = BenchmarksConfig::load(common.config.as_deref())?;
    let manifest = RunManifest::start("correlations", common.config.as_deref(), &[observations], common.seed);
    let obs = read_observation_file(observations)?;
    prepare_out_dir(&common.out_dir)?;
    write_json(&common.out_dir, "correlations.json", &correlation_report(&obs, &cfg.buckets()))?;
    finish(manifest, common, &["correlations.json"])
}

pub fn simulate(common: &Common, kind: &str, n: usize) -> CliResult<Outcome> {
    let mut cfg: SynthConfig = match &common.config {
        Some(p) => read_json_config(p)?,
        None => {
            let kind: BenchmarkKind = kind.parse().map_err(|e: TcaError| CliError::Config(e.to_string()))?;
            SynthConfig::reference(kind, n, 0)
        }
    };
    let mut manifest = RunManifest::start("simulate", common.config.as_deref(), &[], common.seed);
    cfg.seed = manifest.sub_seed("synth");
    cfg.validate()?;
    let obs = generate(&cfg)?;
    prepare_out_dir(&common.out_dir)?;
    io::write_observations(create(&common.out_dir, "observations.csv")?, &obs)?;
    write_json(&common.out_dir, "truth.json", &cfg)?;
    println!("{} {} observations", obs.len(), cfg.kind);
    finish(manifest, common, &["observations.csv", "truth.json"])
}

/// Fit configuration file. The chain seed is always derived from the
/// manifest seed.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub kind: Option<BenchmarkKind>,
    /// Generic-stage prior; defaults to the weakly informative prior.
    pub prior: Option<PriorSpec>,
    pub chain: ChainConfig,
    /// Per-algo stage: algorithms to estimate (empty means all in the data).
    pub algos: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub kind: BenchmarkKind,
    pub stage: String,
    pub algos: Vec<String>,
    pub n_observations: usize,
    pub n_draws: usize,
    #[serde(deserialize_with = "nan_from_null")]
    pub acceptance_rate: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub max_rhat: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub min_ess: f64,
    pub chain: ChainConfig,
    pub prior: PriorSpec,
    pub coefficients: Vec<CoefficientSummary>,
}

struct LoadedFit {
    dir: PathBuf,
    summary: FitSummary,
    samples: PosteriorSamples,
}

fn load_fit(dir: &Path) -> CliResult<LoadedFit> {
    let path = dir.join("summary.json");
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let summary: FitSummary = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let samples = io::read_posterior(open_data(&dir.join("posterior.csv"))?)?;
    Ok(LoadedFit { dir: dir.to_path_buf(), summary, samples })
}

fn load_fits(dirs: &[PathBuf]) -> CliResult<BTreeMap<BenchmarkKind, LoadedFit>> {
    let mut out = BTreeMap::new();
    for d in dirs {
        let fit = load_fit(d)?;
        let kind = fit.summary.kind;
        if out.insert(kind, fit).is_some() {
            return Err(CliError::Config(format!("more than one {kind} fit given")));
        }
    }
    Ok(out)
}

fn resolve_kind(cfg: Option<BenchmarkKind>, flag: Option<&str>) -> CliResult<Option<BenchmarkKind>> {
    let flag = flag.map(|s| s.parse::<BenchmarkKind>().map_err(|e| CliError::Config(e.to_string()))).transpose()?;
    match (cfg, flag) {
        (Some(a), Some(b)) if a != b => Err(CliError::Config(format!("config kind {a} conflicts with --kind {b}"))),
        (a, b) => Ok(a.or(b)),
    }
}

pub fn fit(
    common: &Common,
    observations: &Path,
    stage: Stage,
    stage1: Option<&Path>,
    chains: Option<usize>,
    kind_flag: Option<&str>,
) -> CliResult<Outcome> {
    let mut cfg: FitConfig = match &common.config {
        Some(p) => read_json_config(p)?,
        None => FitConfig::default(),
    };
    if let Some(c) = chains {
        cfg.chain.n_chains = c;
    }
    let mut kind = resolve_kind(cfg.kind, kind_flag)?;
    if let Some(k) = kind {
        if stage == Stage::Generic {
            cfg.chain.validate(n_coefficients(k))?;
        }
        if let Some(p) = &cfg.prior {
            p.validate(k)?;
        }
    } else if cfg.chain.step_scales.is_none() {
        cfg.chain.validate(0)?;
    }
    let stage1_fit = match (stage, stage1) {
        (Stage::PerAlgo, None) => return Err(CliError::Config("--stage per-algo needs --stage1 <generic fit dir>".into())),
        (Stage::PerAlgo, Some(dir)) => {
            let f = load_fit(dir)?;
            match kind {
                Some(k) if k != f.summary.kind => {
                    return Err(CliError::Config(format!("stage-1 fit is {}, not {k}", f.summary.kind)));
                }
                _ => kind = Some(f.summary.kind),
            }
            Some(f)
        }
        (Stage::Generic, _) => None,
    };
    let mut inputs = vec![observations];
    if let Some(d) = stage1 {
        inputs.push(d);
    }
    let mut manifest = RunManifest::start("fit", common.config.as_deref(), &inputs, common.seed);
    cfg.chain.seed = manifest.sub_seed("fit");

    let all = read_observation_file(observations)?;
    let kind = match kind {
        Some(k) => k,
        None => {
            let kinds: BTreeSet<BenchmarkKind> = all.iter().map(|o| o.kind).collect();
            match kinds.len() {
                1 => *kinds.iter().next().expect("one kind"),
                0 => return Err(CliError::Data(format!("{} has no observations", observations.display()))),
                _ => return Err(CliError::Config("observations mix benchmarks; set \"kind\" or --kind".into())),
            }
        }
    };
    let obs: Vec<BenchmarkObservation> = all.into_iter().filter(|o| o.kind == kind).collect();

    let (model, stage_name) = match &stage1_fit {
        None => {
            let prior = cfg.prior.clone().unwrap_or_else(|| PriorSpec::default_for(kind));
            (ModelSpec { kind, prior, pooling: Pooling::Pooled }, "generic")
        }
        Some(f) => (ModelSpec::per_algo(kind, &f.samples, cfg.algos.clone())?, "per_algo"),
    };
    let dim = match &model.pooling {
        Pooling::Pooled => n_coefficients(kind),
        Pooling::PerAlgo { algos } => {
            let n_algos = if algos.is_empty() {
                obs.iter().map(|o| o.algo_id.as_str()).collect::<BTreeSet<_>>().len()
            } else {
                algos.len()
            };
            let shared = model.prior.entries.iter().filter(|e| e.pooling == CoefficientPooling::Shared).count();
            shared + n_algos * (n_coefficients(kind) - shared)
        }
    };
    cfg.chain.validate(dim)?;

    let samples = run_mh(&model, &obs, &cfg.chain)?;
    let summary = FitSummary {
        kind,
        stage: stage_name.into(),
        algos: samples.algos(),
        n_observations: obs.len(),
        n_draws: samples.n_draws(),
        acceptance_rate: samples.acceptance_rate,
        max_rhat: samples.rhat.iter().copied().fold(f64::NAN, f64::max),
        min_ess: samples.ess.iter().copied().fold(f64::NAN, f64::min),
        chain: cfg.chain.clone(),
        prior: model.prior.clone(),
        coefficients: samples.summary.clone(),
    };
    if summary.max_rhat > 1.05 {
        eprintln!("warning: max split-R-hat {:.3} exceeds 1.05; consider longer chains", summary.max_rhat);
    }
    prepare_out_dir(&common.out_dir)?;
    io::write_posterior(create(&common.out_dir, "posterior.csv")?, &samples)?;
    write_json(&common.out_dir, "summary.json", &summary)?;
    println!(
        "{kind} {stage_name} fit: {} observations, {} draws, acceptance {:.3}, max R-hat {:.3}",
        obs.len(),
        samples.n_draws(),
        samples.acceptance_rate,
        summary.max_rhat
    );
    finish(manifest, common, &["posterior.csv", "summary.json"])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub kind: BenchmarkKind,
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
    pub x4: f64,
    #[serde(default)]
    pub algo_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioCost {
    pub scenario: Scenario,
    pub fit_dir: String,
    pub summary: CostSummary,
    pub histogram: Histogram,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub draws: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub scenarios: Vec<ScenarioCost>,
}

/// Cost posterior of one algorithm (or the pooled model when `algo` is
/// `None` or the fit has no per-algorithm columns).
fn fit_cost(fit: &LoadedFit, algo: Option<&str>, x: &Covariates) -> CliResult<CostPosterior> {
    let kind = fit.summary.kind;
    let algo = algo.filter(|_| !fit.summary.algos.is_empty());
    if let Some(a) = algo {
        if !fit.summary.algos.iter().any(|x| x == a) {
            return Err(CliError::Config(format!("{} fit in {} has no algorithm '{a}'", kind, fit.dir.display())));
        }
    }
    let coeffs = fit.samples.coefficients_for(algo, kind)?;
    Ok(cost_posterior(&coeffs, kind, x)?)
}

pub fn cost(common: &Common, fit_dirs: &[PathBuf], scenario: &Path, with_draws: bool) -> CliResult<Outcome> {
    let scenarios: Vec<Scenario> = read_json_config(scenario)?;
    let inputs: Vec<&Path> = std::iter::once(scenario).chain(fit_dirs.iter().map(PathBuf::as_path)).collect();
    let manifest = RunManifest::start("cost", common.config.as_deref(), &inputs, common.seed);
    let fits = load_fits(fit_dirs)?;
    let mut out = Vec::with_capacity(scenarios.len());
    for s in scenarios {
        let fit = fits.get(&s.kind).ok_or_else(|| CliError::Config(format!("no {} fit given for scenario", s.kind)))?;
        let c = fit_cost(fit, s.algo_id.as_deref(), &Covariates::new(s.x1, s.x2, s.x3, s.x4))?;
        out.push(ScenarioCost {
            fit_dir: fit.dir.display().to_string(),
            summary: c.summary.clone(),
            histogram: histogram_fd(&c.values),
            draws: with_draws.then_some(c.values),
            scenario: s,
        });
    }
    prepare_out_dir(&common.out_dir)?;
    write_json(&common.out_dir, "costs.json", &CostReport { scenarios: out })?;
    finish(manifest, common, &["costs.json"])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WheelPick {
    pub kind: BenchmarkKind,
    pub algo_id: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankReport {
    pub scenario: Covariates,
    pub weights: RankingWeights,
    pub cards: Vec<ScoreCard>,
    pub wheel: Option<WheelPick>,
    pub profiles: Vec<HistoricalProfile>,
}

/// One history row per (algorithm, order); rows without an order id all
/// count.
fn histories(obs: &[BenchmarkObservation]) -> BTreeMap<String, Vec<Covariates>> {
    let mut seen: HashSet<(&str, &str)> = HashSet::new();
    let mut out: BTreeMap<String, Vec<Covariates>> = BTreeMap::new();
    for o in obs {
        if let Some(id) = o.order_id.as_deref() {
            if !seen.insert((o.algo_id.as_str(), id)) {
                continue;
            }
        }
        out.entry(o.algo_id.clone()).or_default().push(o.covariates());
    }
    out
}

pub fn rank(common: &Common, fit_dirs: &[PathBuf], history: &Path, scenario: &Path) -> CliResult<Outcome> {
    let weights: RankingWeights = match &common.config {
        Some(p) => read_json_config(p)?,
        None => RankingWeights::default(),
    };
    weights.validate()?;
    let x: Covariates = read_json_config(scenario)?;
    x.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let inputs: Vec<&Path> = [history, scenario].into_iter().chain(fit_dirs.iter().map(PathBuf::as_path)).collect();
    let mut manifest = RunManifest::start("rank", common.config.as_deref(), &inputs, common.seed);
    let wheel_seed = manifest.sub_seed("wheel");

    let fits = load_fits(fit_dirs)?;
    let bw = weights.benchmark_weights.normalized()?;
    if let Some(k) = BenchmarkKind::ALL.into_iter().find(|k| bw.get(*k) > 0.0 && !fits.contains_key(k)) {
        return Err(CliError::Config(format!("{k} has weight {} but no {k} fit was given", bw.get(k))));
    }
    let obs = read_observation_file(history)?;

    let mut profiles = Vec::new();
    let mut costs = Vec::new();
    let mut wheel_costs = Vec::new();
    let primary = bw.primary();
    for (algo, hist) in histories(&obs) {
        let missing: Vec<String> = fits
            .values()
            .filter(|f| !f.summary.algos.is_empty() && !f.summary.algos.contains(&algo))
            .map(|f| f.summary.kind.to_string())
            .collect();
        if !missing.is_empty() {
            eprintln!("warning: skipping '{algo}': no {} coefficients", missing.join("/"));
            continue;
        }
        let profile = match fit_profile(&algo, &hist, DEFAULT_K_MAX) {
            Ok(p) => p,
            Err(e @ TcaError::InsufficientHistory { .. }) => {
                eprintln!("warning: skipping: {e}");
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let mut expected = BTreeMap::new();
        for (kind, fit) in &fits {
            let c = fit_cost(fit, Some(&algo), &x)?;
            expected.insert(*kind, c.summary.mean);
            if *kind == primary {
                wheel_costs.push((algo.clone(), c));
            }
        }
        profiles.push(profile);
        costs.push(AlgoCosts { algo_id: algo, expected });
    }
    if profiles.is_empty() {
        return Err(CliError::Data("no algorithm has enough history to rank".into()));
    }
    let cards = rank_algorithms(&x, &profiles, &costs, &weights)?;
    let wheel = algo_wheel(&wheel_costs, wheel_seed).ok().map(|algo_id| WheelPick { kind: primary, algo_id, seed: wheel_seed });

    prepare_out_dir(&common.out_dir)?;
    io::write_score_cards(create(&common.out_dir, "ranking.csv")?, &cards)?;
    for c in &cards {
        println!("{:>10} total {:8.3} relevance {:8.3} performance {:8.3}{}", c.algo_id, c.total, c.relevance, c.performance, if c.included { "" } else { " (excluded)" });
    }
    write_json(&common.out_dir, "scorecards.json", &RankReport { scenario: x, weights, cards, wheel, profiles })?;
    finish(manifest, common, &["ranking.csv", "scorecards.json"])
}
