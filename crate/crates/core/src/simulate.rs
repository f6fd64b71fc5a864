//! Synthetic binary panels with known truth, accuracy metrics, and a
//! replication harness.
//!
//! Five covariates per person: two dummy pairs coding independent
//! `Bin(2, 0.5)` draws and one `U[−1, 1]` variable. Coefficients are drawn,
//! the truth is normalized, and then half of the items in each covariate
//! family get zero coefficients.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{fit, map_indices, thread_pool, FitOptions, FitResult};
use crate::family::{sigmoid, Family};
use crate::inference::{
    infer, normalize_for_inference, phi_hat_all, psi_hat, Hypothesis, InferenceReport,
};
use crate::init::InitOptions;
use crate::linalg::spd_inverse;
use crate::model::{predict_natural_params, Dataset, Layout, ModelSpec, ParameterSet, Variant};
use crate::normalize::normalize_full;
use crate::selection::{default_init, select_k, SelectOptions};

/// Number of static covariates in the generator.
pub const N_COVARIATES: usize = 5;

/// Covariate families tested jointly: the two dummy pairs and the continuous covariate.
pub const FAMILIES: [(&str, &[usize]); 3] = [("x1x2", &[0, 1]), ("x3x4", &[2, 3]), ("x5", &[4])];

const Z95: f64 = 1.959963984540054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_items: usize,
    pub n_persons: usize,
    #[serde(default = "default_times")]
    pub n_times: usize,
    pub k_star: usize,
    #[serde(default = "default_reps")]
    pub n_reps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    /// Draw `θ_ik` from `N(0, 1)` truncated to `[−1, 1]` times `(k + 1) / 2`,
    /// so factor variances are well separated.
    #[serde(default)]
    pub scaled_factors: bool,
}

fn default_times() -> usize {
    4
}

fn default_reps() -> usize {
    1
}

fn default_variant() -> Variant {
    Variant::Base
}

impl SimConfig {
    pub fn new(n_items: usize, n_persons: usize, k_star: usize) -> Self {
        SimConfig {
            n_items,
            n_persons,
            n_times: 4,
            k_star,
            n_reps: 1,
            seed: 0,
            variant: Variant::Base,
            scaled_factors: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 || self.n_persons == 0 || self.n_times == 0 || self.n_reps == 0 {
            return Err(Error::Config("simulation sizes must be positive".into()));
        }
        if self.k_star == 0 || self.k_star > self.n_items.min(self.n_persons) {
            return Err(Error::Config(format!(
                "k_star must lie in 1..=min(N, J), got {}",
                self.k_star
            )));
        }
        if self.n_times > 20 {
            return Err(Error::Config(
                "n_times above 20 is not supported by the missingness sampler".into(),
            ));
        }
        if self.n_persons <= N_COVARIATES + 1 {
            return Err(Error::Config(
                "n_persons must exceed the number of covariates plus one".into(),
            ));
        }
        Ok(())
    }

    /// Model specification matching the generator at `k` factors.
    pub fn spec(&self, k: usize) -> ModelSpec {
        ModelSpec::from_variant(self.variant, k)
    }
}

#[derive(Debug, Clone)]
pub struct SimTruth {
    pub spec: ModelSpec,
    pub params: ParameterSet,
    pub dataset: Dataset,
}

/// Standard normal truncated to `[−bound, bound]` by rejection.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, bound: f64) -> f64 {
    loop {
        let v: f64 = rng.sample(StandardNormal);
        if v.abs() <= bound {
            return v;
        }
    }
}

/// A `Bin(2, 0.5)` draw as the dummy pair `(1[c = 1], 1[c = 2])`.
pub fn dummy_pair<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    let c = u8::from(rng.gen_bool(0.5)) + u8::from(rng.gen_bool(0.5));
    (f64::from(c == 1), f64::from(c == 2))
}

/// Observation pattern drawn uniformly from the nonzero binary vectors of length `t`.
pub fn observation_pattern<R: Rng + ?Sized>(rng: &mut R, t: usize) -> Vec<bool> {
    let code = rng.gen_range(1..(1u32 << t));
    (0..t).map(|s| code >> s & 1 == 1).collect()
}

/// Expected share of unobserved slices under [`observation_pattern`].
pub fn expected_missing_fraction(t: usize) -> f64 {
    let total: u32 = (1..(1u32 << t)).map(|c| t as u32 - c.count_ones()).sum();
    total as f64 / t as f64 / ((1u32 << t) - 1) as f64
}

/// Draws replication `rep` of the design. Deterministic in `(config.seed, rep)`.
pub fn generate(config: &SimConfig, rep: u64) -> Result<SimTruth> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(rep);
    let (n, n_items, n_times, k) = (
        config.n_persons,
        config.n_items,
        config.n_times,
        config.k_star,
    );
    let spec = config.spec(k);
    let pz = usize::from(spec.use_time_covariates);
    let layout = Layout::new(&spec, n_times, N_COVARIATES, pz);

    let mut x = DMatrix::zeros(n, N_COVARIATES);
    for i in 0..n {
        let (a, b) = dummy_pair(&mut rng);
        let (c, d) = dummy_pair(&mut rng);
        x[(i, 0)] = a;
        x[(i, 1)] = b;
        x[(i, 2)] = c;
        x[(i, 3)] = d;
        x[(i, 4)] = rng.gen_range(-1.0..=1.0);
    }
    let z = (pz > 0).then(|| {
        (0..n_times)
            .map(|_| DMatrix::from_fn(n, pz, |_, _| rng.gen_range(-1.0..=1.0)))
            .collect::<Vec<_>>()
    });

    let mut params = ParameterSet::zeros(n, n_items, &layout);
    for i in 0..n {
        for c in 0..k {
            params.theta[(i, c)] = if config.scaled_factors {
                truncated_normal(&mut rng, 1.0) * (c + 1) as f64 / 2.0
            } else {
                truncated_normal(&mut rng, 3.0)
            };
        }
    }
    for j in 0..n_items {
        for c in 0..layout.gamma_len() {
            params.item_params[(j, c)] = if layout.linear_intercept {
                rng.gen_range(-0.25..=0.25)
            } else {
                rng.gen_range(-1.0..=1.0)
            };
        }
        for c in layout.beta_start()..layout.a_start() {
            params.item_params[(j, c)] = rng.gen_range(0.5..=1.0);
        }
        for c in layout.a_start()..layout.len() {
            params.item_params[(j, c)] = truncated_normal(&mut rng, 3.0);
        }
    }
    let (mut params, _) = normalize_full(&layout, &params, &x)?;

    for (_, cols) in FAMILIES {
        let mut order: Vec<usize> = (0..n_items).collect();
        order.shuffle(&mut rng);
        for &j in &order[..n_items.div_ceil(2)] {
            for b in 0..layout.beta_blocks() {
                for &l in cols {
                    params.item_params[(j, layout.beta_start() + b * N_COVARIATES + l)] = 0.0;
                }
            }
        }
    }

    let observed: Vec<bool> = (0..n)
        .flat_map(|_| observation_pattern(&mut rng, n_times))
        .collect();
    let placeholder = Dataset::new(
        n,
        n_items,
        n_times,
        vec![0.0; n * n_items * n_times],
        observed.clone(),
        x.clone(),
        z.clone(),
        vec![Family::Bernoulli; n_items],
    )?;
    let etas: Vec<DMatrix<f64>> = (0..n_times)
        .map(|t| predict_natural_params(&spec, &placeholder, &params, t))
        .collect::<Result<_>>()?;
    let mut y = vec![0.0; n * n_items * n_times];
    for i in 0..n {
        for j in 0..n_items {
            for (t, eta) in etas.iter().enumerate() {
                let u: f64 = rng.gen();
                if observed[i * n_times + t] {
                    y[(i * n_items + j) * n_times + t] = f64::from(u < sigmoid(eta[(i, j)]));
                }
            }
        }
    }
    let dataset = Dataset::new(
        n,
        n_items,
        n_times,
        y,
        observed,
        x,
        z,
        vec![Family::Bernoulli; n_items],
    )?;
    Ok(SimTruth {
        spec,
        params,
        dataset,
    })
}

/// Accuracy of one replication.
///
/// Per-replication `mmse`, `mamse` and `mtmse` hold the largest single squared
/// error; [`summarize`] turns them into across-replication maxima of means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub loss: f64,
    pub bloss: f64,
    pub mmse: f64,
    pub k_correct: bool,
    pub ecp: f64,
    pub mmfdr: f64,
    pub mmfnr: f64,
    pub aloss: f64,
    pub tloss: f64,
    pub mamse: f64,
    pub mtmse: f64,
    pub aecp: f64,
    pub tecp: f64,
    /// False discovery rate per covariate family, in [`FAMILIES`] order.
    pub fdr: Vec<f64>,
    pub fnr: Vec<f64>,
}

fn sign_correction(a_hat: &DMatrix<f64>, a_true: &DMatrix<f64>) -> DVector<f64> {
    let j = a_hat.nrows() as f64;
    let m = a_hat.transpose() * a_true / j;
    DVector::from_fn(m.nrows(), |k, _| if m[(k, k)] < 0.0 { -1.0 } else { 1.0 })
}

fn all_loadings(p: &ParameterSet, layout: &Layout) -> DMatrix<f64> {
    p.item_params
        .columns(layout.a_start(), layout.a_len())
        .into_owned()
}

fn coefficient_block(p: &ParameterSet, layout: &Layout, b: usize) -> DMatrix<f64> {
    p.item_params
        .columns(
            layout.beta_start() + b * layout.n_covariates,
            layout.n_covariates,
        )
        .into_owned()
}

/// `max_t ‖η̂_t − η*_t‖_F / √(NJ)`.
pub fn natural_parameter_loss(
    spec: &ModelSpec,
    dataset: &Dataset,
    fitted: &ParameterSet,
    truth: &ParameterSet,
) -> Result<f64> {
    let scale = ((dataset.n_persons() * dataset.n_items()) as f64).sqrt();
    let mut worst = 0.0f64;
    for t in 0..dataset.n_times() {
        let d = predict_natural_params(spec, dataset, fitted, t)?
            - predict_natural_params(spec, dataset, truth, t)?;
        worst = worst.max(d.norm() / scale);
    }
    Ok(worst)
}

/// `max_t ‖B̂_t − B*_t‖_F / √J`.
pub fn coefficient_loss(layout: &Layout, fitted: &ParameterSet, truth: &ParameterSet) -> f64 {
    let scale = (fitted.item_params.nrows() as f64).sqrt();
    (0..layout.beta_blocks())
        .map(|b| {
            (coefficient_block(fitted, layout, b) - coefficient_block(truth, layout, b)).norm()
                / scale
        })
        .fold(0.0, f64::max)
}

/// Metrics of a normalized fit at the true number of factors.
///
/// `inference` must come from the same fitted parameters.
pub fn compute_metrics(
    truth: &SimTruth,
    fitted: &ParameterSet,
    inference: &InferenceReport,
    k_hat: usize,
) -> Result<MetricReport> {
    let spec = &truth.spec;
    let ds = &truth.dataset;
    let layout = spec.layout(ds)?;
    if fitted.theta.shape() != truth.params.theta.shape()
        || fitted.item_params.shape() != truth.params.item_params.shape()
    {
        return Err(Error::Config(
            "fitted parameters do not match the truth's dimensions".into(),
        ));
    }
    if inference.per_item.len() != ds.n_items() {
        return Err(Error::Config(
            "inference report does not match the number of items".into(),
        ));
    }
    let (n, n_items, k) = (ds.n_persons(), ds.n_items(), layout.n_factors);

    let loss = natural_parameter_loss(spec, ds, fitted, &truth.params)?;
    let bloss = coefficient_loss(&layout, fitted, &truth.params);

    let mut mmse = 0.0f64;
    let mut covered = 0usize;
    let mut total = 0usize;
    for (j, item) in inference.per_item.iter().enumerate() {
        for pos in 0..layout.beta_len() {
            let beta_true = truth.params.item_params[(j, layout.beta_start() + pos)];
            mmse = mmse.max((item.beta[pos] - beta_true).powi(2));
            let (lo, hi) = inference.interval(j, pos);
            covered += usize::from(lo <= beta_true && beta_true <= hi);
            total += 1;
        }
    }
    let ecp = if total > 0 {
        covered as f64 / total as f64
    } else {
        f64::NAN
    };

    let mut fdr = Vec::new();
    let mut fnr = Vec::new();
    for h in &inference.hypotheses {
        let rejected = inference.rejections(&h.name, 0.05);
        let (mut false_rej, mut rej, mut false_keep, mut keep) = (0usize, 0usize, 0usize, 0usize);
        for (j, &r) in rejected.iter().enumerate() {
            let null_true = (0..layout.beta_blocks()).all(|b| {
                h.coefficients.iter().all(|&l| {
                    truth.params.item_params[(j, layout.beta_start() + b * layout.n_covariates + l)]
                        == 0.0
                })
            });
            if r {
                rej += 1;
                false_rej += usize::from(null_true);
            } else {
                keep += 1;
                false_keep += usize::from(!null_true);
            }
        }
        fdr.push(if rej > 0 {
            false_rej as f64 / rej as f64
        } else {
            0.0
        });
        fnr.push(if keep > 0 {
            false_keep as f64 / keep as f64
        } else {
            0.0
        });
    }
    let mmfdr = fdr.iter().cloned().fold(0.0, f64::max);
    let mmfnr = fnr.iter().cloned().fold(0.0, f64::max);

    // factors and loadings, after fixing column signs against the truth
    let a_hat = all_loadings(fitted, &layout);
    let a_true = all_loadings(&truth.params, &layout);
    let sign = sign_correction(
        &fitted.loadings(&layout, 0),
        &truth.params.loadings(&layout, 0),
    );
    let a_true_s = DMatrix::from_fn(n_items, layout.a_len(), |j, c| {
        a_true[(j, c)] * sign[c % k.max(1)]
    });
    let theta_true_s = DMatrix::from_fn(n, k, |i, c| truth.params.theta[(i, c)] * sign[c]);
    let aloss = (&a_hat - &a_true_s).norm() / (n_items as f64).sqrt();
    let tloss = (&fitted.theta - &theta_true_s).norm() / (n as f64).sqrt();
    let mamse = (&a_hat - &a_true_s)
        .iter()
        .map(|v| v * v)
        .fold(0.0, f64::max);
    let mtmse = (&fitted.theta - &theta_true_s)
        .iter()
        .map(|v| v * v)
        .fold(0.0, f64::max);

    let (aecp, tecp) = if k == 0 {
        (f64::NAN, f64::NAN)
    } else {
        let phis = phi_hat_all(spec, ds, fitted)?;
        let (mut hit, mut all) = (0usize, 0usize);
        for (j, phi) in phis.iter().enumerate() {
            let inv = spd_inverse(&(-phi)).map_err(|e| Error::Numeric(format!("item {j}: {e}")))?;
            for c in 0..layout.a_len() {
                let d = layout.a_start() + c;
                let half = Z95 * (inv[(d, d)].max(0.0) / n as f64).sqrt();
                hit += usize::from((a_hat[(j, c)] - a_true_s[(j, c)]).abs() <= half);
                all += 1;
            }
        }
        let aecp = hit as f64 / all as f64;
        let (mut hit, mut all) = (0usize, 0usize);
        for i in 0..n {
            let psi = psi_hat(spec, ds, fitted, i)?;
            let Ok(inv) = spd_inverse(&(-psi)) else {
                continue;
            };
            for c in 0..k {
                let half = Z95 * (inv[(c, c)].max(0.0) / n_items as f64).sqrt();
                hit += usize::from((fitted.theta[(i, c)] - theta_true_s[(i, c)]).abs() <= half);
                all += 1;
            }
        }
        (
            aecp,
            if all > 0 {
                hit as f64 / all as f64
            } else {
                f64::NAN
            },
        )
    };

    Ok(MetricReport {
        loss,
        bloss,
        mmse,
        k_correct: k_hat == truth.spec.n_factors,
        ecp,
        mmfdr,
        mmfnr,
        aloss,
        tloss,
        mamse,
        mtmse,
        aecp,
        tecp,
        fdr,
        fnr,
    })
}

/// The three covariate-family hypotheses.
pub fn family_hypotheses() -> Vec<Hypothesis> {
    FAMILIES
        .iter()
        .map(|(name, cols)| Hypothesis::new(*name, cols.to_vec()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyOptions {
    pub fit: FitOptions,
    pub init: InitOptions,
    /// Candidate numbers of factors; empty skips selection.
    pub candidates: Vec<usize>,
    /// Also fit the model without factors.
    pub baseline: bool,
    /// Replications run concurrently on this many workers.
    pub threads: usize,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            fit: FitOptions::default(),
            init: InitOptions::default(),
            candidates: (1..=10).collect(),
            baseline: false,
            threads: 1,
        }
    }
}

/// One replication's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRow {
    pub rep: u64,
    pub k_hat: Option<usize>,
    pub loglik: f64,
    pub sweeps: usize,
    pub converged: bool,
    pub metrics: MetricReport,
    /// Coefficient loss of the model without factors.
    pub baseline_bloss: Option<f64>,
    #[serde(skip)]
    beta_sq_err: Vec<f64>,
    #[serde(skip)]
    baseline_sq_err: Vec<f64>,
    #[serde(skip)]
    a_sq_err: Vec<f64>,
    #[serde(skip)]
    theta_sq_err: Vec<f64>,
}

/// Means over successful replications; MSE-type entries are maxima over parameters of across-replication means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub config: SimConfig,
    pub n_success: usize,
    pub n_failed: usize,
    pub p_k_correct: Option<f64>,
    pub loss: f64,
    pub bloss: f64,
    pub mmse: f64,
    pub ecp: f64,
    pub mmfdr: f64,
    pub mmfnr: f64,
    pub mfdr: Vec<f64>,
    pub mfnr: Vec<f64>,
    pub aloss: f64,
    pub tloss: f64,
    pub mamse: f64,
    pub mtmse: f64,
    pub aecp: f64,
    pub tecp: f64,
    pub baseline_bloss: Option<f64>,
    pub baseline_mmse: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub rows: Vec<RepRow>,
    pub failures: Vec<(u64, String)>,
    pub summary: StudySummary,
}

fn squared_errors(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).powi(2))
        .collect()
}

fn run_rep(config: &SimConfig, opts: &StudyOptions, rep: u64) -> Result<RepRow> {
    let truth = generate(config, rep)?;
    let fit_opts = FitOptions {
        threads: 1,
        ..opts.fit.clone()
    };
    let spec = truth.spec.clone();
    let ds = &truth.dataset;
    let layout = spec.layout(ds)?;

    let (k_hat, fit_k): (Option<usize>, FitResult) = if opts.candidates.is_empty() {
        let start = default_init(&spec, ds, &opts.init, fit_opts.seed)?;
        (None, fit(&spec, ds, &start, &fit_opts)?)
    } else {
        let sel_opts = SelectOptions {
            fit: fit_opts.clone(),
            init: opts.init.clone(),
            warm_start: false,
        };
        let mut sel = select_k(&spec, ds, &opts.candidates, &sel_opts)?;
        let at_truth = match sel.fits.remove(&config.k_star) {
            Some(f) => f,
            None => {
                let start = default_init(&spec, ds, &opts.init, fit_opts.seed)?;
                fit(&spec, ds, &start, &fit_opts)?
            }
        };
        (Some(sel.k_hat), at_truth)
    };
    let fitted = normalize_for_inference(&spec, ds, &fit_k.params)?;
    let report = infer(&spec, ds, &fitted, &family_hypotheses())?;
    let metrics = compute_metrics(&truth, &fitted, &report, k_hat.unwrap_or(config.k_star))?;

    let beta_cols = |p: &ParameterSet| {
        p.item_params
            .columns(layout.beta_start(), layout.beta_len())
            .into_owned()
    };
    let sign = sign_correction(
        &fitted.loadings(&layout, 0),
        &truth.params.loadings(&layout, 0),
    );
    let k = layout.n_factors;
    let a_true_s = DMatrix::from_fn(ds.n_items(), layout.a_len(), |j, c| {
        truth.params.item_params[(j, layout.a_start() + c)] * sign[c % k]
    });
    let theta_true_s = DMatrix::from_fn(ds.n_persons(), k, |i, c| {
        truth.params.theta[(i, c)] * sign[c]
    });

    let (baseline_bloss, baseline_sq_err) = if opts.baseline {
        let spec0 = spec.with_factors(0);
        let layout0 = spec0.layout(ds)?;
        let start = default_init(&spec0, ds, &opts.init, fit_opts.seed)?;
        let res = fit(&spec0, ds, &start, &fit_opts)?;
        let b0 = res
            .params
            .item_params
            .columns(layout0.beta_start(), layout0.beta_len())
            .into_owned();
        let bt = beta_cols(&truth.params);
        let loss = (0..layout0.beta_blocks())
            .map(|b| {
                let cols = b * layout0.n_covariates..(b + 1) * layout0.n_covariates;
                let d = b0.columns(cols.start, cols.len()) - bt.columns(cols.start, cols.len());
                d.norm() / (ds.n_items() as f64).sqrt()
            })
            .fold(0.0, f64::max);
        (Some(loss), squared_errors(&b0, &bt))
    } else {
        (None, Vec::new())
    };

    Ok(RepRow {
        rep,
        k_hat,
        loglik: fit_k.loglik,
        sweeps: fit_k.sweeps_used,
        converged: fit_k.converged,
        beta_sq_err: squared_errors(&beta_cols(&fitted), &beta_cols(&truth.params)),
        baseline_sq_err,
        a_sq_err: squared_errors(&all_loadings(&fitted, &layout), &a_true_s),
        theta_sq_err: squared_errors(&fitted.theta, &theta_true_s),
        metrics,
        baseline_bloss,
    })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = v.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    if c == 0 {
        f64::NAN
    } else {
        s / c as f64
    }
}

fn max_mean(rows: &[&Vec<f64>]) -> f64 {
    let Some(first) = rows.first() else {
        return f64::NAN;
    };
    (0..first.len())
        .map(|c| mean(rows.iter().map(|r| r[c])))
        .fold(0.0, f64::max)
}

/// Aggregates replication rows.
pub fn summarize(config: &SimConfig, rows: &[RepRow], n_failed: usize) -> StudySummary {
    let m = |f: &dyn Fn(&MetricReport) -> f64| mean(rows.iter().map(|r| f(&r.metrics)));
    let n_fam = rows.first().map_or(0, |r| r.metrics.fdr.len());
    let mfdr: Vec<f64> = (0..n_fam)
        .map(|h| mean(rows.iter().map(|r| r.metrics.fdr[h])))
        .collect();
    let mfnr: Vec<f64> = (0..n_fam)
        .map(|h| mean(rows.iter().map(|r| r.metrics.fnr[h])))
        .collect();
    let with_k: Vec<&RepRow> = rows.iter().filter(|r| r.k_hat.is_some()).collect();
    let baseline: Vec<&RepRow> = rows.iter().filter(|r| r.baseline_bloss.is_some()).collect();
    StudySummary {
        config: config.clone(),
        n_success: rows.len(),
        n_failed,
        p_k_correct: (!with_k.is_empty()).then(|| {
            with_k.iter().filter(|r| r.metrics.k_correct).count() as f64 / with_k.len() as f64
        }),
        loss: m(&|r| r.loss),
        bloss: m(&|r| r.bloss),
        mmse: max_mean(&rows.iter().map(|r| &r.beta_sq_err).collect::<Vec<_>>()),
        ecp: m(&|r| r.ecp),
        mmfdr: mfdr.iter().cloned().fold(0.0, f64::max),
        mmfnr: mfnr.iter().cloned().fold(0.0, f64::max),
        mfdr,
        mfnr,
        aloss: m(&|r| r.aloss),
        tloss: m(&|r| r.tloss),
        mamse: max_mean(&rows.iter().map(|r| &r.a_sq_err).collect::<Vec<_>>()),
        mtmse: max_mean(&rows.iter().map(|r| &r.theta_sq_err).collect::<Vec<_>>()),
        aecp: m(&|r| r.aecp),
        tecp: m(&|r| r.tecp),
        baseline_bloss: (!baseline.is_empty())
            .then(|| mean(baseline.iter().map(|r| r.baseline_bloss.unwrap()))),
        baseline_mmse: (!baseline.is_empty()).then(|| {
            max_mean(
                &baseline
                    .iter()
                    .map(|r| &r.baseline_sq_err)
                    .collect::<Vec<_>>(),
            )
        }),
    }
}

/// Generate, select, fit at the true `K`, normalize, test and score every replication.
///
/// Failed replications are recorded; the study fails when 10% or more fail.
pub fn run_study(config: &SimConfig, opts: &StudyOptions) -> Result<StudyResult> {
    config.validate()?;
    opts.fit.validate()?;
    let pool = thread_pool(opts.threads)?;
    let outcomes = map_indices(config.n_reps, pool.as_ref(), |r| {
        Ok(run_rep(config, opts, r as u64))
    })?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(row) => rows.push(row),
            Err(e) => {
                log::warn!("replication {r} failed: {e}");
                failures.push((r as u64, e.to_string()));
            }
        }
    }
    if failures.len() * 10 >= config.n_reps && !failures.is_empty() {
        return Err(Error::Numeric(format!(
            "{} of {} replications failed: {}",
            failures.len(),
            config.n_reps,
            failures[0].1
        )));
    }
    let summary = summarize(config, &rows, failures.len());
    Ok(StudyResult {
        rows,
        failures,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn truncated_normal_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let v = truncated_normal(&mut rng, 3.0);
            assert!(v.abs() <= 3.0);
            sum += v;
        }
        assert!((sum / n as f64).abs() < 0.01);
    }

    #[test]
    fn dummy_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            let (a, b) = dummy_pair(&mut rng);
            assert!(a + b <= 1.0);
            counts[if a == 1.0 {
                1
            } else if b == 1.0 {
                2
            } else {
                0
            }] += 1;
        }
        for (c, want) in counts.iter().zip([0.25, 0.5, 0.25]) {
            assert!((*c as f64 / n as f64 - want).abs() < 0.02);
        }
    }

    #[test]
    fn missing_fraction() {
        assert_relative_eq!(expected_missing_fraction(4), 28.0 / 60.0, epsilon = 1e-15);
        assert!((expected_missing_fraction(4) - 0.4667).abs() < 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = 60_000;
        let missing: usize = (0..draws)
            .map(|_| {
                observation_pattern(&mut rng, 4)
                    .iter()
                    .filter(|&&o| !o)
                    .count()
            })
            .sum();
        assert!((missing as f64 / (4 * draws) as f64 - 0.4667).abs() < 0.005);
    }

    #[test]
    fn generator_is_deterministic_and_sparse() {
        let cfg = SimConfig {
            seed: 9,
            ..SimConfig::new(21, 60, 2)
        };
        let a = generate(&cfg, 3).unwrap();
        let b = generate(&cfg, 3).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.dataset.responses(), b.dataset.responses());
        assert_ne!(generate(&cfg, 4).unwrap().params, a.params);
        let layout = a.spec.layout(&a.dataset).unwrap();
        let zero_pairs = (0..21)
            .filter(|&j| (0..2).all(|l| a.params.item_params[(j, layout.beta_start() + l)] == 0.0))
            .count();
        assert_eq!(zero_pairs, 11);
        let zero5 = (0..21)
            .filter(|&j| a.params.item_params[(j, layout.beta_start() + 4)] == 0.0)
            .count();
        assert_eq!(zero5, 11);
        // ΘᵀX = 0 and AᵀA/J = I survive the sparsification
        let tx = a.params.theta.transpose() * a.dataset.covariate_matrix();
        assert!(tx.amax() < 1e-9);
        let aa = a.params.loadings(&layout, 0);
        assert_relative_eq!(
            aa.transpose() * &aa / 21.0,
            DMatrix::identity(2, 2),
            epsilon = 1e-9
        );
    }

    #[test]
    fn every_variant_generates() {
        for v in Variant::ALL {
            let cfg = SimConfig {
                variant: v,
                ..SimConfig::new(10, 40, 2)
            };
            let t = generate(&cfg, 0).unwrap();
            let layout = t.spec.layout(&t.dataset).unwrap();
            t.params.check(&t.dataset, &layout).unwrap();
        }
    }

    #[test]
    fn truth_as_fit_scores_zero() {
        let cfg = SimConfig::new(12, 80, 2);
        let truth = generate(&cfg, 0).unwrap();
        let report = infer(
            &truth.spec,
            &truth.dataset,
            &truth.params,
            &family_hypotheses(),
        )
        .unwrap();
        let m = compute_metrics(&truth, &truth.params, &report, 2).unwrap();
        assert_eq!(
            (m.loss, m.bloss, m.aloss, m.tloss, m.mmse),
            (0.0, 0.0, 0.0, 0.0, 0.0)
        );
        assert!(m.k_correct);

        let mut flipped = truth.params.clone();
        flipped.theta *= -1.0;
        let layout = truth.spec.layout(&truth.dataset).unwrap();
        for c in layout.a_start()..layout.len() {
            flipped.item_params.column_mut(c).neg_mut();
        }
        let m = compute_metrics(&truth, &flipped, &report, 2).unwrap();
        assert_eq!((m.aloss, m.tloss), (0.0, 0.0));
    }

    #[test]
    fn tiny_study_is_reproducible() {
        let cfg = SimConfig {
            n_reps: 2,
            seed: 1,
            ..SimConfig::new(10, 60, 1)
        };
        let opts = StudyOptions {
            candidates: vec![1, 2],
            baseline: true,
            fit: FitOptions {
                rel_tol: 1e-6,
                ..Default::default()
            },
            ..Default::default()
        };
        let a = run_study(&cfg, &opts).unwrap();
        let b = run_study(&cfg, &opts).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.rows.len(), 2);
        assert!(a.summary.baseline_bloss.is_some());
    }
}
