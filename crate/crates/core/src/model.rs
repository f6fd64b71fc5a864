//! Data container, model specification and natural-parameter assembly.
//!
//! Indices are zero-based throughout: persons `i < N`, items `j < J`,
//! times `t < T`. The linear-intercept variant multiplies its intercept by
//! the one-based time `t + 1`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::Family;

/// Responses, missingness and covariates for `N` persons, `J` items and `T` times.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n_persons: usize,
    n_items: usize,
    n_times: usize,
    // [(i * J + j) * T + t]
    responses: Vec<f64>,
    // [i * T + t]
    observed: Vec<bool>,
    // row-major N x p
    covariates: Vec<f64>,
    n_covariates: usize,
    // [(i * T + t) * p_z + l]
    time_covariates: Option<Vec<f64>>,
    n_time_covariates: usize,
    families: Vec<Family>,
}

impl Dataset {
    /// Builds and validates a dataset.
    ///
    /// `responses` is indexed `[(i * J + j) * T + t]`, `observed` is `[i * T + t]`,
    /// `covariates` is an `N x p` matrix and `time_covariates`, when present,
    /// holds `T` matrices of shape `N x p_z`.
    pub fn new(
        n_persons: usize,
        n_items: usize,
        n_times: usize,
        responses: Vec<f64>,
        observed: Vec<bool>,
        covariates: DMatrix<f64>,
        time_covariates: Option<Vec<DMatrix<f64>>>,
        families: Vec<Family>,
    ) -> Result<Self> {
        if n_persons == 0 || n_items == 0 || n_times == 0 {
            return Err(Error::Data("N, J and T must all be positive".into()));
        }
        if responses.len() != n_persons * n_items * n_times {
            return Err(Error::Data(format!(
                "responses has {} entries, expected N*J*T = {}",
                responses.len(),
                n_persons * n_items * n_times
            )));
        }
        if observed.len() != n_persons * n_times {
            return Err(Error::Data(format!(
                "missingness has {} entries, expected N*T = {}",
                observed.len(),
                n_persons * n_times
            )));
        }
        if covariates.nrows() != n_persons {
            return Err(Error::Data(format!(
                "covariates have {} rows, expected {n_persons}",
                covariates.nrows()
            )));
        }
        if families.len() != n_items {
            return Err(Error::Data(format!(
                "{} families given for {n_items} items",
                families.len()
            )));
        }
        let p = covariates.ncols();
        let mut x = Vec::with_capacity(n_persons * p);
        for i in 0..n_persons {
            for l in 0..p {
                let v = covariates[(i, l)];
                if !v.is_finite() {
                    return Err(Error::Data(format!("covariate ({i}, {l}) is not finite")));
                }
                x.push(v);
            }
        }
        let (z, pz) = match time_covariates {
            None => (None, 0),
            Some(mats) => {
                if mats.len() != n_times {
                    return Err(Error::Data(format!(
                        "{} time-covariate matrices given for {n_times} times",
                        mats.len()
                    )));
                }
                let pz = mats[0].ncols();
                let mut z = vec![0.0; n_persons * n_times * pz];
                for (t, m) in mats.iter().enumerate() {
                    if m.nrows() != n_persons || m.ncols() != pz {
                        return Err(Error::Data(format!(
                            "time-covariate matrix {t} has wrong shape"
                        )));
                    }
                    for i in 0..n_persons {
                        for l in 0..pz {
                            let v = m[(i, l)];
                            if !v.is_finite() {
                                return Err(Error::Data(format!(
                                    "time covariate ({i}, {l}) at time {t} is not finite"
                                )));
                            }
                            z[(i * n_times + t) * pz + l] = v;
                        }
                    }
                }
                (Some(z), pz)
            }
        };
        let ds = Dataset {
            n_persons,
            n_items,
            n_times,
            responses,
            observed,
            covariates: x,
            n_covariates: p,
            time_covariates: z,
            n_time_covariates: pz,
            families,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        for i in 0..self.n_persons {
            if !(0..self.n_times).any(|t| self.is_observed(i, t)) {
                return Err(Error::Data(format!(
                    "person {i} has no observed time point"
                )));
            }
            for t in 0..self.n_times {
                if !self.is_observed(i, t) {
                    continue;
                }
                for j in 0..self.n_items {
                    let y = self.response(i, j, t);
                    if !self.families[j].admits(y) {
                        return Err(Error::Data(format!(
                            "response {y} at person {i}, item {j}, time {t} is outside the {:?} support",
                            self.families[j]
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n_persons(&self) -> usize {
        self.n_persons
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn n_time_covariates(&self) -> usize {
        self.n_time_covariates
    }

    pub fn has_time_covariates(&self) -> bool {
        self.time_covariates.is_some()
    }

    #[inline]
    pub fn response(&self, i: usize, j: usize, t: usize) -> f64 {
        self.responses[(i * self.n_items + j) * self.n_times + t]
    }

    #[inline]
    pub fn is_observed(&self, i: usize, t: usize) -> bool {
        self.observed[i * self.n_times + t]
    }

    #[inline]
    pub fn covariate_row(&self, i: usize) -> &[f64] {
        let p = self.n_covariates;
        &self.covariates[i * p..(i + 1) * p]
    }

    #[inline]
    pub fn time_covariate_row(&self, i: usize, t: usize) -> &[f64] {
        match &self.time_covariates {
            Some(z) => {
                let pz = self.n_time_covariates;
                let start = (i * self.n_times + t) * pz;
                &z[start..start + pz]
            }
            None => &[],
        }
    }

    pub fn family(&self, j: usize) -> Family {
        self.families[j]
    }

    pub fn families(&self) -> &[Family] {
        &self.families
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    /// `X` as an `N x p` matrix.
    pub fn covariate_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_persons, self.n_covariates, &self.covariates)
    }

    /// `Z_t` as an `N x p_z` matrix, if time covariates are present.
    pub fn time_covariate_matrix(&self, t: usize) -> Option<DMatrix<f64>> {
        self.time_covariates.as_ref()?;
        Some(DMatrix::from_fn(
            self.n_persons,
            self.n_time_covariates,
            |i, l| self.time_covariate_row(i, t)[l],
        ))
    }

    /// Number of observed person-time slices, `Σ_i Σ_t r_it`.
    pub fn n_observed_slices(&self) -> usize {
        self.observed.iter().filter(|&&r| r).count()
    }

    /// Copy of the dataset with persons' covariate rows reordered by `order`
    /// (row `i` of the result is row `order[i]` of `self`).
    pub fn with_permuted_covariates(&self, order: &[usize]) -> Self {
        let mut out = self.clone();
        let p = self.n_covariates;
        for (i, &src) in order.iter().enumerate() {
            out.covariates[i * p..(i + 1) * p].copy_from_slice(self.covariate_row(src));
        }
        if let Some(z) = &self.time_covariates {
            let pz = self.n_time_covariates;
            let t_len = self.n_times * pz;
            let zo = out.time_covariates.as_mut().expect("cloned");
            for (i, &src) in order.iter().enumerate() {
                zo[i * t_len..(i + 1) * t_len].copy_from_slice(&z[src * t_len..(src + 1) * t_len]);
            }
        }
        out
    }
}

/// Model variants selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "timecov")]
    TimeCovariates,
    #[serde(rename = "tvload")]
    TimeVarying,
    #[serde(rename = "lineargamma")]
    LinearIntercept,
    #[serde(rename = "tvload+lineargamma")]
    TimeVaryingLinearIntercept,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Base,
        Variant::TimeCovariates,
        Variant::TimeVarying,
        Variant::LinearIntercept,
        Variant::TimeVaryingLinearIntercept,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::TimeCovariates => "timecov",
            Variant::TimeVarying => "tvload",
            Variant::LinearIntercept => "lineargamma",
            Variant::TimeVaryingLinearIntercept => "tvload+lineargamma",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant '{s}'"))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Number of factors, extension switches and constraint radii.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub n_factors: usize,
    #[serde(default)]
    pub time_varying_loadings: bool,
    #[serde(default)]
    pub time_varying_coefficients: bool,
    #[serde(default)]
    pub linear_intercept: bool,
    #[serde(default)]
    pub use_time_covariates: bool,
    #[serde(default = "default_radius")]
    pub c1: f64,
    #[serde(default = "default_radius")]
    pub c2: f64,
}

fn default_radius() -> f64 {
    5.0
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            n_factors: 0,
            time_varying_loadings: false,
            time_varying_coefficients: false,
            linear_intercept: false,
            use_time_covariates: false,
            c1: 5.0,
            c2: 5.0,
        }
    }
}

impl ModelSpec {
    pub fn new(n_factors: usize) -> Self {
        ModelSpec {
            n_factors,
            ..Default::default()
        }
    }

    pub fn from_variant(variant: Variant, n_factors: usize) -> Self {
        let mut spec = ModelSpec::new(n_factors);
        match variant {
            Variant::Base => {}
            Variant::TimeCovariates => spec.use_time_covariates = true,
            Variant::TimeVarying => {
                spec.time_varying_loadings = true;
                spec.time_varying_coefficients = true;
            }
            Variant::LinearIntercept => spec.linear_intercept = true,
            Variant::TimeVaryingLinearIntercept => {
                spec.time_varying_loadings = true;
                spec.time_varying_coefficients = true;
                spec.linear_intercept = true;
            }
        }
        spec
    }

    pub fn with_factors(&self, n_factors: usize) -> Self {
        ModelSpec {
            n_factors,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c1.is_finite()) || !(self.c2 > 0.0 && self.c2.is_finite()) {
            return Err(Error::Config(format!(
                "constraint radii must be positive, got c1 = {}, c2 = {}",
                self.c1, self.c2
            )));
        }
        Ok(())
    }

    /// Checks the spec against a dataset and returns the parameter layout.
    pub fn layout(&self, dataset: &Dataset) -> Result<Layout> {
        self.validate()?;
        if self.use_time_covariates && !dataset.has_time_covariates() {
            return Err(Error::Config(
                "time covariates requested but the dataset has none".into(),
            ));
        }
        Ok(Layout::new(
            self,
            dataset.n_times(),
            dataset.n_covariates(),
            if self.use_time_covariates {
                dataset.n_time_covariates()
            } else {
                0
            },
        ))
    }

    /// Radius of the ball `‖θ_i‖ ≤ c1 √K`.
    pub fn person_radius(&self) -> f64 {
        self.c1 * (self.n_factors as f64).sqrt()
    }
}

/// Position of every block inside an item parameter vector `u_j`.
///
/// The order is intercepts, coefficients (one block per time when they vary),
/// time-covariate coefficients, loadings (one block per time when they vary).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n_times: usize,
    pub n_covariates: usize,
    pub n_time_covariates: usize,
    pub n_factors: usize,
    pub linear_intercept: bool,
    pub time_varying_coefficients: bool,
    pub time_varying_loadings: bool,
}

impl Layout {
    pub fn new(
        spec: &ModelSpec,
        n_times: usize,
        n_covariates: usize,
        n_time_covariates: usize,
    ) -> Self {
        Layout {
            n_times,
            n_covariates,
            n_time_covariates,
            n_factors: spec.n_factors,
            linear_intercept: spec.linear_intercept,
            time_varying_coefficients: spec.time_varying_coefficients,
            time_varying_loadings: spec.time_varying_loadings,
        }
    }

    pub fn gamma_len(&self) -> usize {
        if self.linear_intercept {
            1
        } else {
            self.n_times
        }
    }

    pub fn beta_blocks(&self) -> usize {
        if self.time_varying_coefficients {
            self.n_times
        } else {
            1
        }
    }

    pub fn loading_blocks(&self) -> usize {
        if self.time_varying_loadings {
            self.n_times
        } else {
            1
        }
    }

    pub fn beta_start(&self) -> usize {
        self.gamma_len()
    }

    pub fn beta_len(&self) -> usize {
        self.n_covariates * self.beta_blocks()
    }

    pub fn v_start(&self) -> usize {
        self.beta_start() + self.beta_len()
    }

    pub fn a_start(&self) -> usize {
        self.v_start() + self.n_time_covariates
    }

    pub fn a_len(&self) -> usize {
        self.n_factors * self.loading_blocks()
    }

    /// Length `P` of `u_j`.
    pub fn len(&self) -> usize {
        self.a_start() + self.a_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index of the intercept active at time `t`.
    #[inline]
    pub fn gamma_index(&self, t: usize) -> usize {
        if self.linear_intercept {
            0
        } else {
            t
        }
    }

    /// Value multiplying the intercept at time `t`.
    #[inline]
    pub fn gamma_weight(&self, t: usize) -> f64 {
        if self.linear_intercept {
            (t + 1) as f64
        } else {
            1.0
        }
    }

    /// Start of the coefficient block used at time `t`.
    #[inline]
    pub fn beta_offset(&self, t: usize) -> usize {
        let block = if self.time_varying_coefficients { t } else { 0 };
        self.beta_start() + block * self.n_covariates
    }

    /// Start of the loading block used at time `t`.
    #[inline]
    pub fn a_offset(&self, t: usize) -> usize {
        let block = if self.time_varying_loadings { t } else { 0 };
        self.a_start() + block * self.n_factors
    }

    /// Number of nonzero entries of any design row.
    pub fn row_nnz(&self) -> usize {
        1 + self.n_covariates + self.n_time_covariates + self.n_factors
    }

    /// Writes the nonzero entries of `e_it`.
    #[inline]
    pub fn fill_row(
        &self,
        x_i: &[f64],
        z_it: &[f64],
        theta_i: &[f64],
        t: usize,
        row: &mut SparseRow,
    ) {
        row.clear();
        row.push(self.gamma_index(t), self.gamma_weight(t));
        let b = self.beta_offset(t);
        for (l, &x) in x_i.iter().enumerate() {
            row.push(b + l, x);
        }
        let v = self.v_start();
        for (l, &z) in z_it.iter().take(self.n_time_covariates).enumerate() {
            row.push(v + l, z);
        }
        let a = self.a_offset(t);
        for (k, &th) in theta_i.iter().enumerate() {
            row.push(a + k, th);
        }
    }
}

/// Nonzero entries of a design row.
#[derive(Debug, Clone, Default)]
pub struct SparseRow {
    pub idx: Vec<usize>,
    pub val: Vec<f64>,
}

impl SparseRow {
    pub fn with_capacity(n: usize) -> Self {
        SparseRow {
            idx: Vec::with_capacity(n),
            val: Vec::with_capacity(n),
        }
    }

    #[inline]
    pub fn clear(&mut self) {
        self.idx.clear();
        self.val.clear();
    }

    #[inline]
    pub fn push(&mut self, i: usize, v: f64) {
        self.idx.push(i);
        self.val.push(v);
    }

    #[inline]
    pub fn dot(&self, u: &[f64]) -> f64 {
        self.idx
            .iter()
            .zip(&self.val)
            .map(|(&i, &v)| u[i] * v)
            .sum()
    }

    pub fn to_dense(&self, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        for (&i, &v) in self.idx.iter().zip(&self.val) {
            out[i] += v;
        }
        out
    }
}

/// Fitted or candidate parameters `Ξ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    /// `N x K` factor scores.
    pub theta: DMatrix<f64>,
    /// `J x P`; row `j` is `u_j` in [`Layout`] order.
    pub item_params: DMatrix<f64>,
    /// Dispersion `φ_j`, one for Bernoulli and Poisson items.
    pub scale: DVector<f64>,
}

impl ParameterSet {
    pub fn zeros(n_persons: usize, n_items: usize, layout: &Layout) -> Self {
        ParameterSet {
            theta: DMatrix::zeros(n_persons, layout.n_factors),
            item_params: DMatrix::zeros(n_items, layout.len()),
            scale: DVector::from_element(n_items, 1.0),
        }
    }

    pub fn n_factors(&self) -> usize {
        self.theta.ncols()
    }

    pub fn check(&self, dataset: &Dataset, layout: &Layout) -> Result<()> {
        if self.theta.nrows() != dataset.n_persons() || self.theta.ncols() != layout.n_factors {
            return Err(Error::Config(format!(
                "theta is {}x{}, expected {}x{}",
                self.theta.nrows(),
                self.theta.ncols(),
                dataset.n_persons(),
                layout.n_factors
            )));
        }
        if self.item_params.nrows() != dataset.n_items() || self.item_params.ncols() != layout.len()
        {
            return Err(Error::Config(format!(
                "item parameters are {}x{}, expected {}x{}",
                self.item_params.nrows(),
                self.item_params.ncols(),
                dataset.n_items(),
                layout.len()
            )));
        }
        if self.scale.len() != dataset.n_items() {
            return Err(Error::Config("scale vector length differs from J".into()));
        }
        if self.scale.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(
                "dispersion parameters must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Row-major copy of `Θ`.
    pub fn theta_rows(&self) -> Vec<f64> {
        row_major(&self.theta)
    }

    /// Row-major copy of the item parameters.
    pub fn item_rows(&self) -> Vec<f64> {
        row_major(&self.item_params)
    }

    /// Intercept matrix `Γ_t` entry: the effective intercept of item `j` at time `t`.
    pub fn intercept(&self, layout: &Layout, j: usize, t: usize) -> f64 {
        self.item_params[(j, layout.gamma_index(t))] * layout.gamma_weight(t)
    }

    /// `J x p` coefficient matrix `B_t` in effect at time `t`.
    pub fn coefficients(&self, layout: &Layout, t: usize) -> DMatrix<f64> {
        let start = layout.beta_offset(t);
        self.item_params
            .columns(start, layout.n_covariates)
            .into_owned()
    }

    /// `J x K` loading matrix `A_t` in effect at time `t`.
    pub fn loadings(&self, layout: &Layout, t: usize) -> DMatrix<f64> {
        let start = layout.a_offset(t);
        self.item_params
            .columns(start, layout.n_factors)
            .into_owned()
    }
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// A dense design row `e_it`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignRow(pub Vec<f64>);

/// Builds `e_it` for person `i` at time `t` using the factor vector `theta_i`.
pub fn build_design_row(
    spec: &ModelSpec,
    dataset: &Dataset,
    theta_i: &[f64],
    i: usize,
    t: usize,
) -> Result<DesignRow> {
    let layout = spec.layout(dataset)?;
    if theta_i.len() != spec.n_factors {
        return Err(Error::Config(format!(
            "theta_i has length {}, model has {} factors",
            theta_i.len(),
            spec.n_factors
        )));
    }
    if i >= dataset.n_persons() || t >= dataset.n_times() {
        return Err(Error::Config(format!(
            "person {i} or time {t} out of range"
        )));
    }
    if theta_i.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("theta_i is not finite".into()));
    }
    let mut row = SparseRow::with_capacity(layout.row_nnz());
    layout.fill_row(
        dataset.covariate_row(i),
        dataset.time_covariate_row(i, t),
        theta_i,
        t,
        &mut row,
    );
    Ok(DesignRow(row.to_dense(layout.len())))
}

/// Joint log-likelihood without the `c_j(y, φ)` term.
///
/// Unobserved person-time slices contribute nothing.
pub fn joint_loglik(spec: &ModelSpec, dataset: &Dataset, params: &ParameterSet) -> Result<f64> {
    let layout = spec.layout(dataset)?;
    params.check(dataset, &layout)?;
    loglik_rows(
        &layout,
        dataset,
        &params.theta_rows(),
        &params.item_rows(),
        params.scale.as_slice(),
    )
}

pub(crate) fn loglik_rows(
    layout: &Layout,
    dataset: &Dataset,
    theta: &[f64],
    items: &[f64],
    scale: &[f64],
) -> Result<f64> {
    let (k, p_len, n_items) = (layout.n_factors, layout.len(), dataset.n_items());
    let mut row = SparseRow::with_capacity(layout.row_nnz());
    let mut total = 0.0;
    for i in 0..dataset.n_persons() {
        let theta_i = &theta[i * k..(i + 1) * k];
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
            for j in 0..n_items {
                let eta = row.dot(&items[j * p_len..(j + 1) * p_len]);
                if !eta.is_finite() {
                    return Err(Error::NonFiniteEta {
                        person: i,
                        item: j,
                        time: t,
                    });
                }
                let fam = dataset.family(j);
                total += (dataset.response(i, j, t) * eta - fam.cumulant(eta)) / scale[j];
            }
        }
    }
    Ok(total)
}

/// `N x J` matrix of natural parameters `η_ijt` at time `t`.
pub fn predict_natural_params(
    spec: &ModelSpec,
    dataset: &Dataset,
    params: &ParameterSet,
    t: usize,
) -> Result<DMatrix<f64>> {
    let layout = spec.layout(dataset)?;
    params.check(dataset, &layout)?;
    if t >= dataset.n_times() {
        return Err(Error::Config(format!(
            "time index {t} out of range for T = {}",
            dataset.n_times()
        )));
    }
    let theta = params.theta_rows();
    let items = params.item_rows();
    let (k, p_len) = (layout.n_factors, layout.len());
    let mut row = SparseRow::with_capacity(layout.row_nnz());
    let mut out = DMatrix::zeros(dataset.n_persons(), dataset.n_items());
    for i in 0..dataset.n_persons() {
        layout.fill_row(
            dataset.covariate_row(i),
            dataset.time_covariate_row(i, t),
            &theta[i * k..(i + 1) * k],
            t,
            &mut row,
        );
        for j in 0..dataset.n_items() {
            out[(i, j)] = row.dot(&items[j * p_len..(j + 1) * p_len]);
        }
    }
    Ok(out)
}
