//! Joint maximum-likelihood estimation by alternating projected Newton steps.
//!
//! One sweep updates every item vector `u_j` with `Θ` held fixed, then every
//! factor vector `θ_i` with the new item parameters held fixed. Each block
//! takes a single damped Newton step, projected onto its norm ball, with a
//! backtracking line search that never lowers the block objective.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::{Family, POISSON_ETA_MAX};
use crate::linalg::damped_solve;
use crate::model::{loglik_rows, Dataset, Layout, ModelSpec, ParameterSet, SparseRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub max_sweeps: usize,
    pub rel_tol: f64,
    pub line_search_shrink: f64,
    pub max_halvings: usize,
    pub ridge: f64,
    pub seed: u64,
    /// Worker threads for block sweeps; results do not depend on this value.
    pub threads: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_sweeps: 500,
            rel_tol: 1e-7,
            line_search_shrink: 0.5,
            max_halvings: 30,
            ridge: 1e-8,
            seed: 0,
            threads: 1,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0) {
            return Err(Error::Config("rel_tol must be positive".into()));
        }
        if !(self.line_search_shrink > 0.0 && self.line_search_shrink < 1.0) {
            return Err(Error::Config(
                "line_search_shrink must lie in (0, 1)".into(),
            ));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::Config("ridge must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: ParameterSet,
    pub loglik: f64,
    pub sweeps_used: usize,
    pub converged: bool,
    /// Objective after projection of the start (entry 0) and after every sweep.
    pub loglik_trace: Vec<f64>,
    /// Observed Poisson cells whose natural parameter exceeded the clamp.
    pub clamped_cells: usize,
}

/// Euclidean projection onto the ball of radius `c`.
pub fn prox(v: &[f64], c: f64) -> Vec<f64> {
    let mut out = v.to_vec();
    prox_in_place(&mut out, c);
    out
}

#[inline]
pub(crate) fn prox_in_place(v: &mut [f64], c: f64) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > c {
        let s = c / norm;
        v.iter_mut().for_each(|x| *x *= s);
        return true;
    }
    false
}

/// Radius `c2 √P` of the item-parameter ball.
pub fn item_radius(spec: &ModelSpec, layout: &Layout) -> f64 {
    spec.c2 * (layout.len() as f64).sqrt()
}

/// Design rows of every observed `(i, t)` for a fixed `Θ`.
pub(crate) struct CellRows {
    person: Vec<usize>,
    time: Vec<usize>,
    start: Vec<usize>,
    idx: Vec<usize>,
    val: Vec<f64>,
}

impl CellRows {
    pub(crate) fn build(layout: &Layout, dataset: &Dataset, theta: &[f64]) -> Self {
        let k = layout.n_factors;
        let nnz = layout.row_nnz();
        let cells = dataset.n_observed_slices();
        let mut out = CellRows {
            person: Vec::with_capacity(cells),
            time: Vec::with_capacity(cells),
            start: Vec::with_capacity(cells + 1),
            idx: Vec::with_capacity(cells * nnz),
            val: Vec::with_capacity(cells * nnz),
        };
        let mut row = SparseRow::with_capacity(nnz);
        out.start.push(0);
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
                out.person.push(i);
                out.time.push(t);
                out.idx.extend_from_slice(&row.idx);
                out.val.extend_from_slice(&row.val);
                out.start.push(out.idx.len());
            }
        }
        out
    }

    #[inline]
    fn len(&self) -> usize {
        self.person.len()
    }

    #[inline]
    fn row(&self, c: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.start[c], self.start[c + 1]);
        (&self.idx[a..b], &self.val[a..b])
    }

    #[inline]
    fn eta(&self, c: usize, u: &[f64]) -> f64 {
        let (idx, val) = self.row(c);
        idx.iter().zip(val).map(|(&i, &v)| u[i] * v).sum()
    }
}

/// The block objective of one item with `Θ` fixed.
struct ItemProblem<'a> {
    dataset: &'a Dataset,
    rows: &'a CellRows,
    j: usize,
    family: Family,
    inv_scale: f64,
    len: usize,
}

impl<'a> ItemProblem<'a> {
    fn new(
        dataset: &'a Dataset,
        rows: &'a CellRows,
        layout: &Layout,
        j: usize,
        scale: f64,
    ) -> Self {
        ItemProblem {
            dataset,
            rows,
            j,
            family: dataset.family(j),
            inv_scale: 1.0 / scale,
            len: layout.len(),
        }
    }

    fn objective(&self, u: &[f64]) -> f64 {
        let mut total = 0.0;
        for c in 0..self.rows.len() {
            let eta = self.rows.eta(c, u);
            let y = self
                .dataset
                .response(self.rows.person[c], self.j, self.rows.time[c]);
            total += y * eta - self.family.cumulant(eta);
        }
        total * self.inv_scale
    }

    /// Gradient and negated Hessian of the block objective.
    fn grad_hess(&self, u: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.len;
        let mut g = vec![0.0; n];
        let mut h = vec![0.0; n * n];
        for c in 0..self.rows.len() {
            let (idx, val) = self.rows.row(c);
            let eta: f64 = idx.iter().zip(val).map(|(&i, &v)| u[i] * v).sum();
            let y = self
                .dataset
                .response(self.rows.person[c], self.j, self.rows.time[c]);
            let resid = (y - self.family.mean(eta)) * self.inv_scale;
            let w = self.family.variance(eta) * self.inv_scale;
            for a in 0..idx.len() {
                let (ia, va) = (idx[a], val[a]);
                g[ia] += resid * va;
                let wa = w * va;
                for b in a..idx.len() {
                    h[ia * n + idx[b]] += wa * val[b];
                }
            }
        }
        // the sparse pattern may land on either triangle
        for r in 0..n {
            for c in (r + 1)..n {
                let s = h[r * n + c] + h[c * n + r];
                h[r * n + c] = s;
                h[c * n + r] = s;
            }
        }
        (DVector::from_vec(g), DMatrix::from_row_slice(n, n, &h))
    }
}

/// The block objective of one person with item parameters fixed.
struct PersonProblem {
    offset: Vec<f64>,
    y: Vec<f64>,
    family: Vec<Family>,
    inv_scale: Vec<f64>,
    // row-major cells x K
    loadings: Vec<f64>,
    k: usize,
}

impl PersonProblem {
    fn build(
        layout: &Layout,
        dataset: &Dataset,
        theta_i: &[f64],
        items: &[f64],
        scale: &[f64],
        i: usize,
    ) -> Self {
        let k = layout.n_factors;
        let p_len = layout.len();
        let n_items = dataset.n_items();
        let mut prob = PersonProblem {
            offset: Vec::new(),
            y: Vec::new(),
            family: Vec::new(),
            inv_scale: Vec::new(),
            loadings: Vec::new(),
            k,
        };
        let mut row = SparseRow::with_capacity(layout.row_nnz());
        for t in 0..dataset.n_times() {
            if !dataset.is_observed(i, t) {
                continue;
            }
            layout.fill_row(
                dataset.covariate_row(i),
                dataset.time_covariate_row(i, t),
                theta_i,
                t,
                &mut row,
            );
            let a_off = layout.a_offset(t);
            for j in 0..n_items {
                let u = &items[j * p_len..(j + 1) * p_len];
                let a = &u[a_off..a_off + k];
                let factor_part: f64 = a.iter().zip(theta_i).map(|(x, y)| x * y).sum();
                prob.offset.push(row.dot(u) - factor_part);
                prob.y.push(dataset.response(i, j, t));
                prob.family.push(dataset.family(j));
                prob.inv_scale.push(1.0 / scale[j]);
                prob.loadings.extend_from_slice(a);
            }
        }
        prob
    }

    #[inline]
    fn eta(&self, c: usize, theta: &[f64]) -> f64 {
        let a = &self.loadings[c * self.k..(c + 1) * self.k];
        self.offset[c] + a.iter().zip(theta).map(|(x, y)| x * y).sum::<f64>()
    }

    fn objective(&self, theta: &[f64]) -> f64 {
        (0..self.y.len())
            .map(|c| {
                let eta = self.eta(c, theta);
                (self.y[c] * eta - self.family[c].cumulant(eta)) * self.inv_scale[c]
            })
            .sum()
    }

    fn grad_hess(&self, theta: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let k = self.k;
        let mut g = vec![0.0; k];
        let mut h = vec![0.0; k * k];
        for c in 0..self.y.len() {
            let eta = self.eta(c, theta);
            let fam = self.family[c];
            let resid = (self.y[c] - fam.mean(eta)) * self.inv_scale[c];
            let w = fam.variance(eta) * self.inv_scale[c];
            let a = &self.loadings[c * k..(c + 1) * k];
            for r in 0..k {
                g[r] += resid * a[r];
                let wr = w * a[r];
                for s in r..k {
                    h[r * k + s] += wr * a[s];
                }
            }
        }
        for r in 0..k {
            for s in 0..r {
                h[r * k + s] = h[s * k + r];
            }
        }
        (DVector::from_vec(g), DMatrix::from_row_slice(k, k, &h))
    }
}

/// One projected Newton step with monotone backtracking.
///
/// Returns the accepted point and whether it strictly improved the objective.
fn newton_step(
    x: &[f64],
    radius: f64,
    opts: &FitOptions,
    objective: impl Fn(&[f64]) -> f64,
    grad_hess: impl Fn(&[f64]) -> (DVector<f64>, DMatrix<f64>),
) -> Result<(Vec<f64>, bool)> {
    if x.is_empty() {
        return Ok((Vec::new(), false));
    }
    let f0 = objective(x);
    if !f0.is_finite() {
        return Err(Error::Numeric(format!(
            "block objective is {f0} at the current point"
        )));
    }
    let (g, h) = grad_hess(x);
    if g.iter().any(|v| !v.is_finite()) || h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "non-finite block gradient or Hessian".into(),
        ));
    }
    if g.iter().all(|&v| v == 0.0) {
        return Ok((x.to_vec(), false));
    }
    let dir = damped_solve(&h, &g, opts.ridge).unwrap_or_else(|| {
        log::debug!("damped Newton solve failed; using the gradient direction");
        g.clone()
    });
    let (newton, f_newton, projected) = search(x, &dir, 1.0, radius, opts, f0, &objective);
    if !projected && f_newton > f0 {
        return Ok((newton, true));
    }
    // Projected Newton steps need not ascend on the boundary; a projected
    // gradient step from the Cauchy length always does at a non-stationary point.
    let curvature = -(g.transpose() * &h * &g)[0];
    let cauchy = if curvature > 0.0 {
        g.norm_squared() / curvature
    } else {
        1.0
    };
    let (grad, f_grad, _) = search(x, &g, cauchy, radius, opts, f0, &objective);
    let (best, f_best) = if f_grad > f_newton {
        (grad, f_grad)
    } else {
        (newton, f_newton)
    };
    if f_best >= f0 {
        Ok((best, f_best > f0))
    } else {
        Ok((x.to_vec(), false))
    }
}

/// Backtracking along `dir` from step `alpha`, projecting every trial point.
///
/// Returns the first non-decreasing point (or `x` itself with `f0`), its value,
/// and whether any trial point was shortened by the projection.
fn search(
    x: &[f64],
    dir: &DVector<f64>,
    mut alpha: f64,
    radius: f64,
    opts: &FitOptions,
    f0: f64,
    objective: &impl Fn(&[f64]) -> f64,
) -> (Vec<f64>, f64, bool) {
    let mut cand = vec![0.0; x.len()];
    let mut projected = false;
    for _ in 0..=opts.max_halvings {
        for (c, (&xi, &di)) in cand.iter_mut().zip(x.iter().zip(dir.iter())) {
            *c = xi + alpha * di;
        }
        projected |= prox_in_place(&mut cand, radius);
        let f = objective(&cand);
        if f.is_finite() && f >= f0 {
            return (cand, f, projected);
        }
        alpha *= opts.line_search_shrink;
    }
    (x.to_vec(), f0, projected)
}

fn setup(spec: &ModelSpec, dataset: &Dataset, params: &ParameterSet) -> Result<Layout> {
    let layout = spec.layout(dataset)?;
    params.check(dataset, &layout)?;
    Ok(layout)
}

/// Gradient of item `j`'s block objective with respect to `u_j`.
pub fn item_block_gradient(
    spec: &ModelSpec,
    dataset: &Dataset,
    params: &ParameterSet,
    j: usize,
) -> Result<DVector<f64>> {
    let layout = setup(spec, dataset, params)?;
    let rows = CellRows::build(&layout, dataset, &params.theta_rows());
    let u: Vec<f64> = params.item_params.row(j).iter().cloned().collect();
    Ok(
        ItemProblem::new(dataset, &rows, &layout, j, params.scale[j])
            .grad_hess(&u)
            .0,
    )
}

/// Gradient of person `i`'s block objective with respect to `θ_i`.
pub fn person_block_gradient(
    spec: &ModelSpec,
    dataset: &Dataset,
    params: &ParameterSet,
    i: usize,
) -> Result<DVector<f64>> {
    let layout = setup(spec, dataset, params)?;
    let theta_i: Vec<f64> = params.theta.row(i).iter().cloned().collect();
    let prob = PersonProblem::build(
        &layout,
        dataset,
        &theta_i,
        &params.item_rows(),
        params.scale.as_slice(),
        i,
    );
    Ok(prob.grad_hess(&theta_i).0)
}

/// `Σ_{i,t} r_it φ_j⁻¹ (y η − b(η))` for item `j`.
pub fn item_block_objective(
    spec: &ModelSpec,
    dataset: &Dataset,
    params: &ParameterSet,
    j: usize,
) -> Result<f64> {
    let layout = setup(spec, dataset, params)?;
    let rows = CellRows::build(&layout, dataset, &params.theta_rows());
    let u: Vec<f64> = params.item_params.row(j).iter().cloned().collect();
    Ok(ItemProblem::new(dataset, &rows, &layout, j, params.scale[j]).objective(&u))
}

/// `Σ_{j,t} r_it φ_j⁻¹ (y η − b(η))` for person `i`.
pub fn person_block_objective(
    spec: &ModelSpec,
    dataset: &Dataset,
    params: &ParameterSet,
    i: usize,
) -> Result<f64> {
    let layout = setup(spec, dataset, params)?;
    let theta_i: Vec<f64> = params.theta.row(i).iter().cloned().collect();
    let prob = PersonProblem::build(
        &layout,
        dataset,
        &theta_i,
        &params.item_rows(),
        params.scale.as_slice(),
        i,
    );
    Ok(prob.objective(&theta_i))
}

/// One Newton update of `u_j` with `Θ` fixed.
pub fn item_block_update(
    spec: &ModelSpec,
    dataset: &Dataset,
    params: &ParameterSet,
    j: usize,
    opts: &FitOptions,
) -> Result<(DVector<f64>, bool)> {
    let layout = setup(spec, dataset, params)?;
    if j >= dataset.n_items() {
        return Err(Error::Config(format!("item {j} out of range")));
    }
    let rows = CellRows::build(&layout, dataset, &params.theta_rows());
    let u: Vec<f64> = params.item_params.row(j).iter().cloned().collect();
    let (u_new, improved) = update_item(
        &layout,
        dataset,
        &rows,
        j,
        &u,
        params.scale[j],
        item_radius(spec, &layout),
        opts,
    )?;
    Ok((DVector::from_vec(u_new), improved))
}

/// One Newton update of `θ_i` with the item parameters fixed.
pub fn person_block_update(
    spec: &ModelSpec,
    dataset: &Dataset,
    params: &ParameterSet,
    i: usize,
    opts: &FitOptions,
) -> Result<(DVector<f64>, bool)> {
    let layout = setup(spec, dataset, params)?;
    if i >= dataset.n_persons() {
        return Err(Error::Config(format!("person {i} out of range")));
    }
    let theta_i: Vec<f64> = params.theta.row(i).iter().cloned().collect();
    let (t_new, improved) = update_person(
        &layout,
        dataset,
        &params.item_rows(),
        params.scale.as_slice(),
        i,
        &theta_i,
        spec.person_radius(),
        opts,
    )?;
    Ok((DVector::from_vec(t_new), improved))
}

#[allow(clippy::too_many_arguments)]
fn update_item(
    layout: &Layout,
    dataset: &Dataset,
    rows: &CellRows,
    j: usize,
    u: &[f64],
    scale: f64,
    radius: f64,
    opts: &FitOptions,
) -> Result<(Vec<f64>, bool)> {
    let prob = ItemProblem::new(dataset, rows, layout, j, scale);
    newton_step(
        u,
        radius,
        opts,
        |v| prob.objective(v),
        |v| prob.grad_hess(v),
    )
    .map_err(|e| Error::Numeric(format!("item {j}: {e}")))
}

#[allow(clippy::too_many_arguments)]
fn update_person(
    layout: &Layout,
    dataset: &Dataset,
    items: &[f64],
    scale: &[f64],
    i: usize,
    theta_i: &[f64],
    radius: f64,
    opts: &FitOptions,
) -> Result<(Vec<f64>, bool)> {
    if layout.n_factors == 0 {
        return Ok((Vec::new(), false));
    }
    let prob = PersonProblem::build(layout, dataset, theta_i, items, scale, i);
    newton_step(
        theta_i,
        radius,
        opts,
        |v| prob.objective(v),
        |v| prob.grad_hess(v),
    )
    .map_err(|e| Error::Numeric(format!("person {i}: {e}")))
}

/// Newton iterations on the coordinates `free` of `u_j`, the rest held fixed.
///
/// Used to fit covariate coefficients given factors, loadings and intercepts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fit_item_subset(
    layout: &Layout,
    dataset: &Dataset,
    rows: &CellRows,
    j: usize,
    u: &mut [f64],
    free: &[usize],
    radius: f64,
    iterations: usize,
    opts: &FitOptions,
) -> Result<()> {
    if free.is_empty() {
        return Ok(());
    }
    let prob = ItemProblem::new(dataset, rows, layout, j, 1.0);
    let base = u.to_vec();
    let expand = |sub: &[f64]| {
        let mut full = base.clone();
        for (&f, &v) in free.iter().zip(sub) {
            full[f] = v;
        }
        full
    };
    let mut sub: Vec<f64> = free.iter().map(|&f| u[f]).collect();
    for _ in 0..iterations {
        let (next, improved) = newton_step(
            &sub,
            radius,
            opts,
            |s| prob.objective(&expand(s)),
            |s| {
                let (g, h) = prob.grad_hess(&expand(s));
                let gs = DVector::from_iterator(free.len(), free.iter().map(|&f| g[f]));
                let hs = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
                (gs, hs)
            },
        )?;
        let change: f64 = next
            .iter()
            .zip(&sub)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        sub = next;
        if !improved || change < 1e-10 {
            break;
        }
    }
    for (&f, &v) in free.iter().zip(&sub) {
        u[f] = v;
    }
    Ok(())
}

/// Closed-form dispersion update for Gaussian items: mean squared residual over observed cells.
fn update_scales(
    layout: &Layout,
    dataset: &Dataset,
    theta: &[f64],
    items: &[f64],
    scale: &mut [f64],
) {
    if dataset.families().iter().all(|f| f.has_unit_scale()) {
        return;
    }
    let (k, p_len) = (layout.n_factors, layout.len());
    let mut sums = vec![0.0; dataset.n_items()];
    let mut count = 0usize;
    let mut row = SparseRow::with_capacity(layout.row_nnz());
    for i in 0..dataset.n_persons() {
        for t in 0..dataset.n_times() {
            if !dataset.is_observed(i, t) {
                continue;
            }
            count += 1;
            layout.fill_row(
                dataset.covariate_row(i),
                dataset.time_covariate_row(i, t),
                &theta[i * k..(i + 1) * k],
                t,
                &mut row,
            );
            for (j, s) in sums.iter_mut().enumerate() {
                if dataset.family(j) == Family::Gaussian {
                    let r = dataset.response(i, j, t) - row.dot(&items[j * p_len..(j + 1) * p_len]);
                    *s += r * r;
                }
            }
        }
    }
    for (j, s) in sums.into_iter().enumerate() {
        if dataset.family(j) == Family::Gaussian {
            scale[j] = (s / count as f64).max(1e-8);
        }
    }
}

fn count_clamped(layout: &Layout, dataset: &Dataset, theta: &[f64], items: &[f64]) -> usize {
    if !dataset.families().contains(&Family::Poisson) {
        return 0;
    }
    let (k, p_len) = (layout.n_factors, layout.len());
    let mut row = SparseRow::with_capacity(layout.row_nnz());
    let mut n = 0;
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
            for j in 0..dataset.n_items() {
                if dataset.family(j) == Family::Poisson
                    && row.dot(&items[j * p_len..(j + 1) * p_len]) > POISSON_ETA_MAX
                {
                    n += 1;
                }
            }
        }
    }
    n
}

pub(crate) fn thread_pool(threads: usize) -> Result<Option<rayon::ThreadPool>> {
    if threads <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))
}

/// Maps `f` over `0..n`, on the pool when one is given. Output order is fixed.
pub(crate) fn map_indices<T, F>(n: usize, pool: Option<&rayon::ThreadPool>, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    match pool {
        None => (0..n).map(&f).collect(),
        Some(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
    }
}

/// Maximizes the joint log-likelihood subject to the norm-ball constraints.
pub fn fit(
    spec: &ModelSpec,
    dataset: &Dataset,
    init: &ParameterSet,
    opts: &FitOptions,
) -> Result<FitResult> {
    opts.validate()?;
    let layout = setup(spec, dataset, init)?;
    let pool = thread_pool(opts.threads)?;
    let (n, n_items, k, p_len) = (
        dataset.n_persons(),
        dataset.n_items(),
        layout.n_factors,
        layout.len(),
    );
    let item_r = item_radius(spec, &layout);
    let person_r = spec.person_radius();

    let mut theta = init.theta_rows();
    let mut items = init.item_rows();
    let mut scale: Vec<f64> = init.scale.iter().cloned().collect();
    for i in 0..n {
        prox_in_place(&mut theta[i * k..(i + 1) * k], person_r);
    }
    for j in 0..n_items {
        prox_in_place(&mut items[j * p_len..(j + 1) * p_len], item_r);
    }

    let has_gaussian = dataset.families().iter().any(|f| !f.has_unit_scale());
    let mut current = loglik_rows(&layout, dataset, &theta, &items, &scale)?;
    let mut trace = vec![current];
    let mut converged = false;
    let mut sweeps = 0;

    for sweep in 1..=opts.max_sweeps {
        let annotate = |e: Error| Error::Sweep {
            sweep,
            source: Box::new(e),
        };
        if has_gaussian {
            update_scales(&layout, dataset, &theta, &items, &mut scale);
            current = loglik_rows(&layout, dataset, &theta, &items, &scale).map_err(annotate)?;
        }
        let previous = current;

        let rows = CellRows::build(&layout, dataset, &theta);
        let new_items = map_indices(n_items, pool.as_ref(), |j| {
            let u = &items[j * p_len..(j + 1) * p_len];
            update_item(&layout, dataset, &rows, j, u, scale[j], item_r, opts).map(|r| r.0)
        })
        .map_err(annotate)?;
        for (j, u) in new_items.into_iter().enumerate() {
            items[j * p_len..(j + 1) * p_len].copy_from_slice(&u);
        }

        if k > 0 {
            let new_theta = map_indices(n, pool.as_ref(), |i| {
                update_person(
                    &layout,
                    dataset,
                    &items,
                    &scale,
                    i,
                    &theta[i * k..(i + 1) * k],
                    person_r,
                    opts,
                )
                .map(|r| r.0)
            })
            .map_err(annotate)?;
            for (i, th) in new_theta.into_iter().enumerate() {
                theta[i * k..(i + 1) * k].copy_from_slice(&th);
            }
        }

        current = loglik_rows(&layout, dataset, &theta, &items, &scale).map_err(annotate)?;
        trace.push(current);
        sweeps = sweep;
        if (current - previous).abs() <= opts.rel_tol * (1.0 + previous.abs()) {
            converged = true;
            break;
        }
    }

    let clamped_cells = count_clamped(&layout, dataset, &theta, &items);
    if clamped_cells > 0 {
        log::warn!("{clamped_cells} Poisson cells have natural parameters above {POISSON_ETA_MAX}");
    }
    let params = ParameterSet {
        theta: DMatrix::from_row_slice(n, k, &theta),
        item_params: DMatrix::from_row_slice(n_items, p_len, &items),
        scale: DVector::from_vec(scale),
    };
    Ok(FitResult {
        params,
        loglik: current,
        sweeps_used: sweeps,
        converged,
        loglik_trace: trace,
        clamped_cells,
    })
}
