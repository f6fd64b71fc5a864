use std::collections::BTreeMap;
use std::path::Path;

use longfactor::family::sigmoid;
use longfactor::inference::{infer, normalize_for_inference, permutation_test_b, Hypothesis};
use longfactor::model::{Dataset, ModelSpec, ParameterSet};
use longfactor::predict::{predict_proba_next, recommend, residual_deviance, sensitivity};
use longfactor::selection::{default_init, penalty_lambda, select_k as run_selection};
use longfactor::simulate::{generate, run_study, StudyOptions, StudySummary};
use longfactor::{predict_natural_params, Family, RecommendationConfig, SelectOptions, SimConfig};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::io::{self, DataPaths, ParamsFile};

fn out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))
}

fn fmt(v: f64) -> String {
    v.to_string()
}

/// Fields shared by every report.
#[derive(Serialize)]
struct Header<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    threads: usize,
}

impl<'a> Header<'a> {
    fn new(command: &'a str, cfg: &RunConfig) -> Self {
        Header {
            command,
            config_hash: cfg.hash(),
            seed: cfg.seed,
            threads: cfg.threads,
        }
    }
}

#[derive(Serialize)]
struct DataSummary {
    n_persons: usize,
    n_items: usize,
    n_times: usize,
    n_covariates: usize,
    n_observed_slices: usize,
}

impl DataSummary {
    fn of(ds: &Dataset) -> Self {
        DataSummary {
            n_persons: ds.n_persons(),
            n_items: ds.n_items(),
            n_times: ds.n_times(),
            n_covariates: ds.n_covariates(),
            n_observed_slices: ds.n_observed_slices(),
        }
    }
}

#[derive(Serialize)]
struct FitReport<'a> {
    #[serde(flatten)]
    header: Header<'a>,
    data: DataSummary,
    spec: ModelSpec,
    loglik: f64,
    converged: bool,
    sweeps_used: usize,
    clamped_cells: usize,
    loglik_trace: Vec<f64>,
}

fn fit_and_normalize(
    cfg: &RunConfig,
    spec: &ModelSpec,
    ds: &Dataset,
) -> Result<(ParameterSet, longfactor::FitResult), CliError> {
    let start = default_init(spec, ds, &cfg.init, cfg.seed)?;
    let res = longfactor::fit(spec, ds, &start, &cfg.fit)?;
    let params = normalize_for_inference(spec, ds, &res.params)?;
    Ok((params, res))
}

pub fn fit(cfg: &RunConfig, paths: &DataPaths, out: &Path) -> Result<(), CliError> {
    let ds = io::load_dataset(paths, cfg.family, cfg.n_covariates)?;
    let spec = cfg.spec(cfg.k);
    let layout = spec.layout(&ds)?;
    let (params, res) = fit_and_normalize(cfg, &spec, &ds)?;
    out_dir(out)?;
    io::write_json(
        &out.join("params.json"),
        &ParamsFile::new(&spec, &layout, &params),
    )?;
    let report = FitReport {
        header: Header::new("fit", cfg),
        data: DataSummary::of(&ds),
        spec,
        loglik: res.loglik,
        converged: res.converged,
        sweeps_used: res.sweeps_used,
        clamped_cells: res.clamped_cells,
        loglik_trace: res.loglik_trace,
    };
    io::write_json(&out.join("report.json"), &report)
}

#[derive(Serialize)]
struct CandidateRow {
    k: usize,
    loglik: f64,
    ic: f64,
    converged: bool,
    sweeps_used: usize,
}

#[derive(Serialize)]
struct SelectReport<'a> {
    #[serde(flatten)]
    header: Header<'a>,
    data: DataSummary,
    variant: String,
    penalty: f64,
    k_hat: usize,
    candidates: Vec<CandidateRow>,
}

pub fn select_k(cfg: &RunConfig, paths: &DataPaths, out: &Path) -> Result<(), CliError> {
    let ds = io::load_dataset(paths, cfg.family, cfg.n_covariates)?;
    let template = cfg.spec(0);
    let opts = SelectOptions {
        fit: cfg.fit.clone(),
        init: cfg.init.clone(),
        warm_start: cfg.warm_start,
    };
    let sel = run_selection(&template, &ds, &cfg.k_set, &opts)?;
    let rows: Vec<CandidateRow> = sel
        .fits
        .iter()
        .map(|(&k, f)| CandidateRow {
            k,
            loglik: f.loglik,
            ic: sel.ic_values[&k],
            converged: f.converged,
            sweeps_used: f.sweeps_used,
        })
        .collect();
    let spec = cfg.spec(sel.k_hat);
    let layout = spec.layout(&ds)?;
    let params = normalize_for_inference(&spec, &ds, &sel.fits[&sel.k_hat].params)?;
    out_dir(out)?;
    io::write_csv(
        &out.join("ic.csv"),
        &["k", "loglik", "ic", "converged", "sweeps_used"],
        rows.iter().map(|r| {
            vec![
                r.k.to_string(),
                fmt(r.loglik),
                fmt(r.ic),
                r.converged.to_string(),
                r.sweeps_used.to_string(),
            ]
        }),
    )?;
    io::write_json(
        &out.join("params.json"),
        &ParamsFile::new(&spec, &layout, &params),
    )?;
    let report = SelectReport {
        header: Header::new("select-k", cfg),
        data: DataSummary::of(&ds),
        variant: cfg.variant.to_string(),
        penalty: penalty_lambda(&template, &ds)?,
        k_hat: sel.k_hat,
        candidates: rows,
    };
    io::write_json(&out.join("report.json"), &report)
}

#[derive(Serialize)]
struct Failure {
    rep: u64,
    error: String,
}

#[derive(Serialize)]
struct SimulateReport<'a> {
    #[serde(flatten)]
    header: Header<'a>,
    candidates: Vec<usize>,
    summary: StudySummary,
    failures: Vec<Failure>,
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

pub fn simulate(cfg: &RunConfig, out: &Path, write_data: bool) -> Result<(), CliError> {
    let s = &cfg.simulation;
    let sim = SimConfig {
        n_items: s.n_items,
        n_persons: s.n_persons,
        n_times: s.n_times,
        k_star: s.k_star,
        n_reps: s.n_reps,
        seed: cfg.seed,
        variant: cfg.variant,
        scaled_factors: s.scaled_factors,
    };
    sim.validate()?;
    let candidates = if s.skip_selection {
        Vec::new()
    } else {
        cfg.k_set.clone()
    };
    let opts = StudyOptions {
        fit: cfg.fit.clone(),
        init: cfg.init.clone(),
        candidates: candidates.clone(),
        baseline: s.baseline,
        threads: cfg.threads,
    };
    out_dir(out)?;
    if write_data {
        let truth = generate(&sim, 0)?;
        let dir = out.join("data");
        out_dir(&dir)?;
        io::write_dataset(&dir, &truth.dataset)?;
        let layout = truth.spec.layout(&truth.dataset)?;
        io::write_json(
            &dir.join("truth.json"),
            &ParamsFile::new(&truth.spec, &layout, &truth.params),
        )?;
    }
    let study = run_study(&sim, &opts)?;
    io::write_csv(
        &out.join("reps.csv"),
        &[
            "rep",
            "k_hat",
            "loglik",
            "sweeps",
            "converged",
            "loss",
            "bloss",
            "mmse",
            "ecp",
            "mmfdr",
            "mmfnr",
            "aloss",
            "tloss",
            "aecp",
            "tecp",
            "baseline_bloss",
        ],
        study.rows.iter().map(|r| {
            let m = &r.metrics;
            vec![
                r.rep.to_string(),
                r.k_hat.map(|k| k.to_string()).unwrap_or_default(),
                fmt(r.loglik),
                r.sweeps.to_string(),
                r.converged.to_string(),
                fmt(m.loss),
                fmt(m.bloss),
                fmt(m.mmse),
                fmt(m.ecp),
                fmt(m.mmfdr),
                fmt(m.mmfnr),
                fmt(m.aloss),
                fmt(m.tloss),
                fmt(m.aecp),
                fmt(m.tecp),
                opt(r.baseline_bloss),
            ]
        }),
    )?;
    let report = SimulateReport {
        header: Header::new("simulate", cfg),
        candidates,
        summary: study.summary,
        failures: study
            .failures
            .into_iter()
            .map(|(rep, error)| Failure { rep, error })
            .collect(),
    };
    io::write_json(&out.join("report.json"), &report)
}

/// Loads a parameter file and checks it against the dataset.
fn load_params(path: &Path, ds: &Dataset) -> Result<(ModelSpec, ParameterSet), CliError> {
    let file = ParamsFile::load(path)?;
    let params = file.params()?;
    let layout = file.spec.layout(ds)?;
    if layout != file.layout() {
        return Err(CliError::Input(format!(
            "{}: parameters do not match the data's dimensions",
            path.display()
        )));
    }
    params.check(ds, &layout)?;
    Ok((file.spec, params))
}

#[derive(Serialize)]
struct HypothesisSummary {
    name: String,
    rejected_at_0_05: usize,
}

#[derive(Serialize)]
struct PermutationSummary {
    n_perm: usize,
    statistic: f64,
    p_value: f64,
    dropped: usize,
}

#[derive(Serialize)]
struct EvaluateReport<'a> {
    #[serde(flatten)]
    header: Header<'a>,
    data: DataSummary,
    spec: ModelSpec,
    hypotheses: Vec<HypothesisSummary>,
    permutation: Option<PermutationSummary>,
}

pub fn evaluate(
    cfg: &RunConfig,
    paths: &DataPaths,
    params_path: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let ds = io::load_dataset(paths, cfg.family, cfg.n_covariates)?;
    let p = ds.n_covariates();
    if p == 0 {
        return Err(CliError::Input(
            "evaluate needs a covariates file with at least one covariate".into(),
        ));
    }
    let (spec, params) = match params_path {
        Some(path) => {
            let (spec, raw) = load_params(path, &ds)?;
            let params = normalize_for_inference(&spec, &ds, &raw)?;
            (spec, params)
        }
        None => {
            let spec = cfg.spec(cfg.k);
            (spec.clone(), fit_and_normalize(cfg, &spec, &ds)?.0)
        }
    };
    let hypotheses = Hypothesis::each_coefficient(p);
    let report = infer(&spec, &ds, &params, &hypotheses)?;

    out_dir(out)?;
    let mut coef_rows = Vec::new();
    for (j, it) in report.per_item.iter().enumerate() {
        for pos in 0..it.beta.len() {
            let (lo, hi) = report.interval(j, pos);
            coef_rows.push(vec![
                (j + 1).to_string(),
                format!("x{}", pos % p + 1),
                (pos / p + 1).to_string(),
                fmt(it.beta[pos]),
                fmt(it.beta_se[pos]),
                fmt(lo),
                fmt(hi),
            ]);
        }
    }
    io::write_csv(
        &out.join("coefficients.csv"),
        &[
            "item",
            "covariate",
            "block",
            "estimate",
            "std_error",
            "ci_lower",
            "ci_upper",
        ],
        coef_rows,
    )?;
    let mut wald_rows = Vec::new();
    for (j, it) in report.per_item.iter().enumerate() {
        for h in &hypotheses {
            let adj = it.adj_p_values[&h.name];
            wald_rows.push(vec![
                (j + 1).to_string(),
                h.name.clone(),
                fmt(it.wald_stats[&h.name]),
                fmt(it.p_values[&h.name]),
                fmt(adj),
                (adj <= 0.05).to_string(),
            ]);
        }
    }
    io::write_csv(
        &out.join("wald.csv"),
        &[
            "item",
            "hypothesis",
            "statistic",
            "p_value",
            "by_adjusted_p_value",
            "rejected_at_0_05",
        ],
        wald_rows,
    )?;

    let permutation = if cfg.n_perm > 0 {
        let perm = permutation_test_b(&spec, &ds, &cfg.fit, &cfg.init, cfg.n_perm, cfg.seed)?;
        io::write_csv(
            &out.join("permutation.csv"),
            &["replicate", "statistic"],
            perm.null_stats
                .iter()
                .enumerate()
                .map(|(r, s)| vec![(r + 1).to_string(), fmt(*s)]),
        )?;
        Some(PermutationSummary {
            n_perm: cfg.n_perm,
            statistic: perm.stat,
            p_value: perm.p_value,
            dropped: perm.dropped,
        })
    } else {
        None
    };
    let summary = EvaluateReport {
        header: Header::new("evaluate", cfg),
        data: DataSummary::of(&ds),
        spec,
        hypotheses: hypotheses
            .iter()
            .map(|h| HypothesisSummary {
                name: h.name.clone(),
                rejected_at_0_05: report
                    .rejections(&h.name, 0.05)
                    .iter()
                    .filter(|&&r| r)
                    .count(),
            })
            .collect(),
        permutation,
    };
    io::write_json(&out.join("report.json"), &summary)
}

#[derive(Serialize)]
struct PredictReport<'a> {
    #[serde(flatten)]
    header: Header<'a>,
    data: DataSummary,
    top_k: usize,
    /// Summed residual deviance per time point; absent for non-binary items.
    deviance_by_time: Option<Vec<f64>>,
    sensitivity: Option<BTreeMap<String, f64>>,
}

pub fn predict(
    cfg: &RunConfig,
    paths: &DataPaths,
    params_path: &Path,
    future: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let ds = io::load_dataset(paths, cfg.family, cfg.n_covariates)?;
    let (spec, params) = load_params(params_path, &ds)?;
    let (n, n_items) = (ds.n_persons(), ds.n_items());
    let probs = predict_proba_next(&spec, &ds, &params)?;
    out_dir(out)?;
    let mut pred_rows = Vec::with_capacity(n * n_items);
    for i in 0..n {
        for j in 0..n_items {
            pred_rows.push(vec![
                (i + 1).to_string(),
                (j + 1).to_string(),
                fmt(probs[(i, j)]),
            ]);
        }
    }
    io::write_csv(
        &out.join("predictions.csv"),
        &["person", "item", "predicted"],
        pred_rows,
    )?;

    let binary = ds.families().iter().all(|&f| f == Family::Bernoulli);
    let mut deviance_by_time = None;
    let mut sens = None;
    if !binary {
        log::warn!("deviance and recommendations need binary items; only predictions were written");
    } else {
        let mut dev_rows = Vec::new();
        let mut totals = Vec::with_capacity(ds.n_times());
        for t in 0..ds.n_times() {
            let fitted = predict_natural_params(&spec, &ds, &params, t)?.map(sigmoid);
            let (per_item, total) = residual_deviance(&ds, &fitted, t)?;
            for (j, d) in per_item.iter().enumerate() {
                dev_rows.push(vec![(t + 1).to_string(), (j + 1).to_string(), fmt(*d)]);
            }
            totals.push(total);
        }
        io::write_csv(
            &out.join("deviance.csv"),
            &["time", "item", "deviance"],
            dev_rows,
        )?;
        deviance_by_time = Some(totals);

        let history = DMatrix::from_fn(n, n_items, |i, j| {
            (0..ds.n_times())
                .filter(|&t| ds.is_observed(i, t) && ds.response(i, j, t) == 1.0)
                .count() as u32
        });
        let top_k = cfg.top_k.min(n_items);
        let actual = future.map(|p| io::read_future(p, n, n_items)).transpose()?;
        let mut rec_rows = Vec::new();
        let mut scores = BTreeMap::new();
        for &strategy in &cfg.strategies {
            let rc = RecommendationConfig {
                strategy,
                top_k,
                tie_seed: cfg.seed,
            };
            let recs = recommend(&rc, &history, &probs)?;
            for (i, list) in recs.iter().enumerate() {
                for (rank, &j) in list.iter().enumerate() {
                    rec_rows.push(vec![
                        strategy.to_string(),
                        (i + 1).to_string(),
                        (rank + 1).to_string(),
                        (j + 1).to_string(),
                    ]);
                }
            }
            if let Some(actual) = &actual {
                scores.insert(strategy.to_string(), sensitivity(&recs, actual)?);
            }
        }
        io::write_csv(
            &out.join("recommendations.csv"),
            &["strategy", "person", "rank", "item"],
            rec_rows,
        )?;
        if actual.is_some() {
            io::write_csv(
                &out.join("sensitivity.csv"),
                &["strategy", "top_k", "sensitivity"],
                scores
                    .iter()
                    .map(|(s, v)| vec![s.clone(), top_k.to_string(), fmt(*v)]),
            )?;
            sens = Some(scores);
        }
    }
    let report = PredictReport {
        header: Header::new("predict", cfg),
        data: DataSummary::of(&ds),
        top_k: cfg.top_k.min(n_items),
        deviance_by_time,
        sensitivity: sens,
    };
    io::write_json(&out.join("report.json"), &report)
}
