//! Asymptotic variances, Wald tests with BY adjustment, and a permutation
//! test for `B = 0`.
//!
//! `Φ̂_j = −N⁻¹ Σ_{i,t} r_it φ_j⁻¹ b″(η̂_ijt) ê_it ê_itᵀ`; the covariance of
//! `√N(β̂_j − β_j)` is estimated by the coefficient block of `(−Φ̂_j)⁻¹`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::estimator::{fit, map_indices, thread_pool, FitOptions};
use crate::init::InitOptions;
use crate::linalg::{smallest_eigenvalue, spd_inverse};
use crate::model::{Dataset, Layout, ModelSpec, ParameterSet, SparseRow};
use crate::normalize::{normalize_beta_only, normalize_full};
use crate::selection::default_init;
use crate::stats::{by_adjust, chi2_sf};

/// A joint null `β_jl = 0` for every `l` in `coefficients` (zero-based covariate columns).
///
/// With time-varying coefficients the null covers those columns at every time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hypothesis {
    pub name: String,
    pub coefficients: Vec<usize>,
}

impl Hypothesis {
    pub fn new(name: impl Into<String>, coefficients: Vec<usize>) -> Self {
        Hypothesis {
            name: name.into(),
            coefficients,
        }
    }

    /// One single-coefficient hypothesis per covariate, named `x1`, `x2`, ...
    pub fn each_coefficient(p: usize) -> Vec<Hypothesis> {
        (0..p)
            .map(|l| Hypothesis::new(format!("x{}", l + 1), vec![l]))
            .collect()
    }

    fn positions(&self, layout: &Layout) -> Vec<usize> {
        let p = layout.n_covariates;
        let mut out = Vec::new();
        for b in 0..layout.beta_blocks() {
            for &l in &self.coefficients {
                out.push(b * p + l);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemInference {
    /// Coefficient estimates in layout order.
    pub beta: DVector<f64>,
    pub sigma_e: DMatrix<f64>,
    /// `sqrt(diag(Σ̂_E) / N)`.
    pub beta_se: DVector<f64>,
    pub wald_stats: BTreeMap<String, f64>,
    pub p_values: BTreeMap<String, f64>,
    pub adj_p_values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceReport {
    pub n_persons: usize,
    pub hypotheses: Vec<Hypothesis>,
    pub per_item: Vec<ItemInference>,
}

impl InferenceReport {
    /// Items whose BY-adjusted p-value for `hypothesis` is at most `level`.
    pub fn rejections(&self, hypothesis: &str, level: f64) -> Vec<bool> {
        self.per_item
            .iter()
            .map(|it| it.adj_p_values.get(hypothesis).is_some_and(|&p| p <= level))
            .collect()
    }

    /// 95% interval for coefficient `pos` (layout order) of item `j`.
    pub fn interval(&self, j: usize, pos: usize) -> (f64, f64) {
        let it = &self.per_item[j];
        let half = 1.959963984540054 * it.beta_se[pos];
        (it.beta[pos] - half, it.beta[pos] + half)
    }
}

fn accumulate(h: &mut DMatrix<f64>, row: &SparseRow, w: f64) {
    for (a, (&ia, &va)) in row.idx.iter().zip(&row.val).enumerate() {
        for (&ib, &vb) in row.idx[a..].iter().zip(&row.val[a..]) {
            let add = w * va * vb;
            h[(ia, ib)] += add;
            if ia != ib {
                h[(ib, ia)] += add;
            }
        }
    }
}

fn check_definite(m: &DMatrix<f64>) -> Result<()> {
    let smallest = smallest_eigenvalue(&(-m));
    let largest = m.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1e-300);
    if !(smallest > 1e-12 * largest) {
        return Err(Error::NearSingular { smallest });
    }
    Ok(())
}

/// `Φ̂_j` for every item, in one pass over the observed slices.
pub fn phi_hat_all(
    spec: &ModelSpec,
    dataset: &Dataset,
    params: &ParameterSet,
) -> Result<Vec<DMatrix<f64>>> {
    let layout = spec.layout(dataset)?;
    params.check(dataset, &layout)?;
    let (k, p_len, n_items) = (layout.n_factors, layout.len(), dataset.n_items());
    let mut out = vec![DMatrix::zeros(p_len, p_len); n_items];
    let mut row = SparseRow::with_capacity(layout.row_nnz());
    let items = params.item_rows();
    let theta = params.theta_rows();
    for i in 0..dataset.n_persons() {
        for t in 0..dataset.n_times() {
            if !dataset.is_observed(i, t) {
                continue;
            }
            layout.fill_row(
                dataset.covariate_row(i),
                dataset.time_covariate_row(i, t),
                &theta[i * k..(i + 1) * k],
                t,
                &mut row,
            );
            for (j, h) in out.iter_mut().enumerate() {
                let eta = row.dot(&items[j * p_len..(j + 1) * p_len]);
                let w = dataset.family(j).variance(eta) / params.scale[j];
                accumulate(h, &row, w);
            }
        }
    }
    let scale = -1.0 / dataset.n_persons() as f64;
    for h in out.iter_mut() {
        *h *= scale;
    }
    Ok(out)
}

/// `Φ̂_j` for a single item; fails when `−Φ̂_j` is not safely positive definite.
pub fn phi_hat(
    spec: &ModelSpec,
    dataset: &Dataset,
    params: &ParameterSet,
    j: usize,
) -> Result<DMatrix<f64>> {
    if j >= dataset.n_items() {
        return Err(Error::Config(format!("item {j} out of range")));
    }
    let layout = spec.layout(dataset)?;
    params.check(dataset, &layout)?;
    let k = layout.n_factors;
    let p_len = layout.len();
    let u: Vec<f64> = params.item_params.row(j).iter().cloned().collect();
    let theta = params.theta_rows();
    let mut h = DMatrix::zeros(p_len, p_len);
    let mut row = SparseRow::with_capacity(layout.row_nnz());
    for i in 0..dataset.n_persons() {
        for t in 0..dataset.n_times() {
            if dataset.is_observed(i, t) {
                layout.fill_row(
                    dataset.covariate_row(i),
                    dataset.time_covariate_row(i, t),
                    &theta[i * k..(i + 1) * k],
                    t,
                    &mut row,
                );
                let w = dataset.family(j).variance(row.dot(&u)) / params.scale[j];
                accumulate(&mut h, &row, w);
            }
        }
    }
    h *= -1.0 / dataset.n_persons() as f64;
    check_definite(&h)?;
    Ok(h)
}

/// Coefficient block of `(−Φ)⁻¹`.
pub fn sigma_e(phi: &DMatrix<f64>, layout: &Layout) -> Result<DMatrix<f64>> {
    if phi.nrows() != layout.len() || phi.ncols() != layout.len() {
        return Err(Error::Config("Φ does not match the layout".into()));
    }
    let inv = spd_inverse(&(-phi))?;
    let (s, l) = (layout.beta_start(), layout.beta_len());
    Ok(inv.view((s, s), (l, l)).into_owned())
}

/// Loading block of `(−Φ)⁻¹`.
pub fn sigma_a(phi: &DMatrix<f64>, layout: &Layout) -> Result<DMatrix<f64>> {
    let inv = spd_inverse(&(-phi))?;
    let (s, l) = (layout.a_start(), layout.a_len());
    Ok(inv.view((s, s), (l, l)).into_owned())
}

/// `Ψ̂_i = −J⁻¹ Σ_{j,t} r_it φ_j⁻¹ b″(η̂_ijt) â_jt â_jtᵀ`, the factor-score analogue of `Φ̂_j`.
///
/// Experimental: used for factor-score intervals only.
pub fn psi_hat(
    spec: &ModelSpec,
    dataset: &Dataset,
    params: &ParameterSet,
    i: usize,
) -> Result<DMatrix<f64>> {
    let layout = spec.layout(dataset)?;
    params.check(dataset, &layout)?;
    let k = layout.n_factors;
    let mut h = DMatrix::zeros(k, k);
    let theta_i: Vec<f64> = params.theta.row(i).iter().cloned().collect();
    let mut row = SparseRow::with_capacity(layout.row_nnz());
    for t in 0..dataset.n_times() {
        if !dataset.is_observed(i, t) {
            continue;
        }
        layout.fill_row(
            dataset.covariate_row(i),
            dataset.time_covariate_row(i, t),
            &theta_i,
            t,
            &mut row,
        );
        let a_off = layout.a_offset(t);
        for j in 0..dataset.n_items() {
            let u = params.item_params.row(j);
            let eta: f64 = row.idx.iter().zip(&row.val).map(|(&c, &v)| u[c] * v).sum();
            let w = dataset.family(j).variance(eta) / params.scale[j];
            let a = u.columns(a_off, k).transpose();
            h += &a * a.transpose() * w;
        }
    }
    Ok(h * (-1.0 / dataset.n_items() as f64))
}

/// `n β̂ᵀ Σ⁻¹ β̂` and its chi-square tail probability with `q = len(β̂)` degrees of freedom.
pub fn wald_test(beta: &DVector<f64>, sigma: &DMatrix<f64>, n: usize) -> Result<(f64, f64)> {
    if beta.is_empty() || sigma.nrows() != beta.len() || sigma.ncols() != beta.len() {
        return Err(Error::Config(
            "Wald test needs a nonempty coefficient vector and a matching covariance".into(),
        ));
    }
    let inv = spd_inverse(sigma)?;
    let stat = n as f64 * (beta.transpose() * inv * beta)[(0, 0)];
    Ok((stat, chi2_sf(stat, beta.len())))
}

/// Wald tests of every hypothesis for every item, BY-adjusted across items within each hypothesis.
///
/// `params` should satisfy `ΘᵀX = 0`; see [`normalize_for_inference`].
pub fn infer(
    spec: &ModelSpec,
    dataset: &Dataset,
    params: &ParameterSet,
    hypotheses: &[Hypothesis],
) -> Result<InferenceReport> {
    let layout = spec.layout(dataset)?;
    for h in hypotheses {
        if h.coefficients.is_empty() || h.coefficients.iter().any(|&l| l >= layout.n_covariates) {
            return Err(Error::Config(format!(
                "hypothesis '{}' names no valid covariate",
                h.name
            )));
        }
    }
    let n = dataset.n_persons();
    let phis = phi_hat_all(spec, dataset, params)?;
    let mut per_item = Vec::with_capacity(phis.len());
    for (j, phi) in phis.iter().enumerate() {
        let sig = sigma_e(phi, &layout).map_err(|e| Error::Numeric(format!("item {j}: {e}")))?;
        let beta = DVector::from_iterator(
            layout.beta_len(),
            (layout.beta_start()..layout.v_start()).map(|c| params.item_params[(j, c)]),
        );
        let beta_se =
            DVector::from_fn(sig.nrows(), |r, _| (sig[(r, r)].max(0.0) / n as f64).sqrt());
        let mut wald_stats = BTreeMap::new();
        let mut p_values = BTreeMap::new();
        for h in hypotheses {
            let pos = h.positions(&layout);
            let b = DVector::from_iterator(pos.len(), pos.iter().map(|&c| beta[c]));
            let s = DMatrix::from_fn(pos.len(), pos.len(), |a, c| sig[(pos[a], pos[c])]);
            let (stat, p) = wald_test(&b, &s, n)
                .map_err(|e| Error::Numeric(format!("item {j}, {}: {e}", h.name)))?;
            wald_stats.insert(h.name.clone(), stat);
            p_values.insert(h.name.clone(), p);
        }
        per_item.push(ItemInference {
            beta,
            sigma_e: sig,
            beta_se,
            wald_stats,
            p_values,
            adj_p_values: BTreeMap::new(),
        });
    }
    for h in hypotheses {
        let raw: Vec<f64> = per_item.iter().map(|it| it.p_values[&h.name]).collect();
        for (it, adj) in per_item.iter_mut().zip(by_adjust(&raw)) {
            it.adj_p_values.insert(h.name.clone(), adj);
        }
    }
    Ok(InferenceReport {
        n_persons: n,
        hypotheses: hypotheses.to_vec(),
        per_item,
    })
}

/// Full identifiability transform, or the coefficient-only one when the full transform is unavailable.
pub fn normalize_for_inference(
    spec: &ModelSpec,
    dataset: &Dataset,
    params: &ParameterSet,
) -> Result<ParameterSet> {
    let layout = spec.layout(dataset)?;
    let x = dataset.covariate_matrix();
    match normalize_full(&layout, params, &x) {
        Ok((p, _)) => Ok(p),
        Err(e @ (Error::RankDeficient { .. } | Error::Config(_))) => Err(e),
        Err(e) => {
            log::warn!("full normalization failed ({e}); enforcing ΘᵀX = 0 only");
            normalize_beta_only(&layout, params, &x)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PermutationResult {
    pub stat: f64,
    pub p_value: f64,
    pub null_stats: Vec<f64>,
    pub dropped: usize,
}

/// Fit, normalize, and return `‖B̂‖_F`.
fn coefficient_norm(
    spec: &ModelSpec,
    dataset: &Dataset,
    fit_opts: &FitOptions,
    init: &InitOptions,
) -> Result<f64> {
    let start = default_init(spec, dataset, init, fit_opts.seed)?;
    let res = fit(spec, dataset, &start, fit_opts)?;
    let layout = spec.layout(dataset)?;
    let norm = normalize_beta_only(&layout, &res.params, &dataset.covariate_matrix())?;
    Ok(norm
        .item_params
        .columns(layout.beta_start(), layout.beta_len())
        .norm())
}

/// `(1 + #{null ≥ observed}) / (1 + n_perm)`.
pub fn permutation_p_value(observed: f64, null_stats: &[f64]) -> f64 {
    let exceed = null_stats.iter().filter(|&&s| s >= observed).count();
    (1 + exceed) as f64 / (1 + null_stats.len()) as f64
}

/// Permutation test of `B = 0` using `‖B̂‖_F`; replicate `r` shuffles persons' covariates with seed `seed + r`.
///
/// Replicates are refitted sequentially inside a pool of `fit_opts.threads` workers.
pub fn permutation_test_b(
    spec: &ModelSpec,
    dataset: &Dataset,
    fit_opts: &FitOptions,
    init: &InitOptions,
    n_perm: usize,
    seed: u64,
) -> Result<PermutationResult> {
    if n_perm == 0 {
        return Err(Error::Config("n_perm must be at least 1".into()));
    }
    if dataset.n_covariates() == 0 {
        return Err(Error::Config("permutation test needs covariates".into()));
    }
    let single = FitOptions {
        threads: 1,
        ..fit_opts.clone()
    };
    let stat = coefficient_norm(spec, dataset, &single, init)?;
    let pool = thread_pool(fit_opts.threads)?;
    let outcomes = map_indices(n_perm, pool.as_ref(), |r| {
        let mut order: Vec<usize> = (0..dataset.n_persons()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64)));
        let shuffled = dataset.with_permuted_covariates(&order);
        Ok(
            coefficient_norm(spec, &shuffled, &single, init).map_err(|e| {
                log::warn!("permutation {r} failed: {e}");
                e
            }),
        )
    })?;
    let null_stats: Vec<f64> = outcomes
        .iter()
        .filter_map(|o| o.as_ref().ok().copied())
        .collect();
    let dropped = n_perm - null_stats.len();
    if dropped * 10 >= n_perm && dropped > 0 {
        return Err(Error::Numeric(format!(
            "{dropped} of {n_perm} permutation fits failed"
        )));
    }
    Ok(PermutationResult {
        stat,
        p_value: permutation_p_value(stat, &null_stats),
        null_stats,
        dropped,
    })
}
