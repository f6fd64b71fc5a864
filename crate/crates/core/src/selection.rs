//! Choosing the number of factors by an information criterion.
//!
//! `IC(K) = −2 l(Ξ̂_K) + K Λ` with `Λ = M log(J Σ r_it / M)`, where `M` is
//! `max(N, J)`, or `max(N, TJ)` when loadings vary over time.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{fit, FitOptions, FitResult};
use crate::init::{random_init, svd_init, InitOptions};
use crate::model::{Dataset, ModelSpec, ParameterSet};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectOptions {
    pub fit: FitOptions,
    pub init: InitOptions,
    /// Start each `K` from the previous candidate's fit plus one new factor.
    pub warm_start: bool,
}

#[derive(Debug, Clone)]
pub struct SelectionResult {
    pub k_hat: usize,
    pub ic_values: BTreeMap<usize, f64>,
    pub fits: BTreeMap<usize, FitResult>,
}

/// Per-factor penalty `Λ`.
pub fn penalty_lambda(spec: &ModelSpec, dataset: &Dataset) -> Result<f64> {
    let observed = dataset.n_observed_slices();
    if observed == 0 {
        return Err(Error::Data("no observed person-time slices".into()));
    }
    let n = dataset.n_persons() as f64;
    let j = dataset.n_items() as f64;
    let width = if spec.time_varying_loadings {
        dataset.n_times() as f64 * j
    } else {
        j
    };
    let m = n.max(width);
    Ok(m * (j * observed as f64 / m).ln())
}

/// `−2 l + K Λ`.
pub fn information_criterion(loglik: f64, k: usize, lambda: f64) -> f64 {
    -2.0 * loglik + k as f64 * lambda
}

/// SVD start when every item is binary, otherwise a seeded random start.
pub fn default_init(
    spec: &ModelSpec,
    dataset: &Dataset,
    init: &InitOptions,
    seed: u64,
) -> Result<ParameterSet> {
    match svd_init(spec, dataset, init) {
        Err(Error::UnsupportedInit { item, family }) => {
            log::info!("item {item} is {family:?}; using a random start");
            random_init(spec, dataset, seed)
        }
        other => other,
    }
}

/// Previous fit with one more factor taken from a fresh start.
fn extend_start(
    spec: &ModelSpec,
    dataset: &Dataset,
    prev: &ParameterSet,
    fresh: &ParameterSet,
) -> Result<ParameterSet> {
    let prev_spec = spec.with_factors(prev.n_factors());
    let old = prev_spec.layout(dataset)?;
    let new = spec.layout(dataset)?;
    let (k_old, k_new) = (old.n_factors, new.n_factors);
    let mut out = fresh.clone();
    out.scale = prev.scale.clone();
    out.theta.columns_mut(0, k_old).copy_from(&prev.theta);
    out.item_params
        .columns_mut(0, old.a_start())
        .copy_from(&prev.item_params.columns(0, old.a_start()));
    for b in 0..new.loading_blocks() {
        out.item_params
            .columns_mut(new.a_start() + b * k_new, k_old)
            .copy_from(&prev.item_params.columns(old.a_start() + b * k_old, k_old));
        // zero new loadings keep the starting likelihood equal to the previous fit's
        out.item_params
            .column_mut(new.a_start() + b * k_new + k_old)
            .fill(0.0);
    }
    // shrink only the new factor so that the start is already feasible
    let radius = spec.person_radius();
    for i in 0..out.theta.nrows() {
        let old_sq: f64 = prev.theta.row(i).norm_squared();
        let room = (radius * radius - old_sq).max(0.0).sqrt();
        let v = &mut out.theta[(i, k_old)];
        *v = v.clamp(-room, room);
    }
    Ok(out)
}

fn argmin(ic_values: &BTreeMap<usize, f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (&k, &ic) in ic_values {
        if best.map_or(true, |(_, b)| ic < b) {
            best = Some((k, ic));
        }
    }
    best.map(|b| b.0)
}

/// Fits every candidate and returns the minimizer of the criterion; ties go to the smaller `K`.
pub fn select_k(
    spec_template: &ModelSpec,
    dataset: &Dataset,
    candidates: &[usize],
    opts: &SelectOptions,
) -> Result<SelectionResult> {
    if candidates.is_empty() {
        return Err(Error::Config("candidate set is empty".into()));
    }
    let mut ks = candidates.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let lambda = penalty_lambda(spec_template, dataset)?;
    let mut ic_values = BTreeMap::new();
    let mut fits: BTreeMap<usize, FitResult> = BTreeMap::new();
    let mut previous: Option<(usize, ParameterSet)> = None;
    for &k in &ks {
        let spec = spec_template.with_factors(k);
        let attempt = (|| {
            let fresh = default_init(&spec, dataset, &opts.init, opts.fit.seed)?;
            let start = match (&previous, opts.warm_start) {
                (Some((pk, p)), true) if *pk + 1 == k => extend_start(&spec, dataset, p, &fresh)?,
                _ => fresh,
            };
            fit(&spec, dataset, &start, &opts.fit)
        })();
        match attempt {
            Ok(res) => {
                if let Some((pk, prev)) = fits.iter().next_back() {
                    if *pk + 1 == k && res.loglik < prev.loglik - 1e-6 * prev.loglik.abs() {
                        log::info!("log-likelihood at K={k} is below K={pk}");
                    }
                }
                ic_values.insert(k, information_criterion(res.loglik, k, lambda));
                previous = Some((k, res.params.clone()));
                fits.insert(k, res);
            }
            Err(e) => {
                log::warn!("fit with K={k} failed: {e}");
                previous = None;
            }
        }
    }
    let k_hat =
        argmin(&ic_values).ok_or_else(|| Error::Numeric("every candidate fit failed".into()))?;
    Ok(SelectionResult {
        k_hat,
        ic_values,
        fits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::Family;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn full(n: usize, j: usize, t: usize) -> Dataset {
        let y: Vec<f64> = (0..n * j * t).map(|c| (c % 3 == 0) as u8 as f64).collect();
        Dataset::new(
            n,
            j,
            t,
            y,
            vec![true; n * t],
            DMatrix::zeros(n, 0),
            None,
            vec![Family::Bernoulli; j],
        )
        .unwrap()
    }

    #[test]
    fn penalty_examples() {
        let ds = full(500, 100, 4);
        assert_relative_eq!(
            penalty_lambda(&ModelSpec::new(3), &ds).unwrap(),
            500.0 * 400f64.ln(),
            epsilon = 1e-9
        );
        assert_relative_eq!(
            penalty_lambda(&ModelSpec::new(3), &ds).unwrap(),
            2995.732273553991,
            epsilon = 1e-9
        );
        let sq = full(20, 20, 3);
        assert_relative_eq!(
            penalty_lambda(&ModelSpec::new(1), &sq).unwrap(),
            20.0 * 60f64.ln(),
            epsilon = 1e-9
        );
        let tv = full(100, 50, 4);
        let spec = ModelSpec::from_variant(crate::model::Variant::TimeVarying, 1);
        assert_relative_eq!(
            penalty_lambda(&spec, &tv).unwrap(),
            200.0 * (50.0 * 400.0f64 / 200.0).ln(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn singleton_candidate() {
        let ds = full(12, 5, 2);
        let opts = SelectOptions {
            fit: FitOptions {
                max_sweeps: 5,
                ..Default::default()
            },
            ..Default::default()
        };
        let res = select_k(&ModelSpec::new(0), &ds, &[4], &opts).unwrap();
        assert_eq!(res.k_hat, 4);
        assert_eq!(res.ic_values.len(), 1);
    }

    #[test]
    fn ic_uses_reported_loglik() {
        let ds = full(12, 5, 2);
        let opts = SelectOptions {
            fit: FitOptions {
                max_sweeps: 5,
                ..Default::default()
            },
            ..Default::default()
        };
        let res = select_k(&ModelSpec::new(0), &ds, &[0, 1], &opts).unwrap();
        let lambda = penalty_lambda(&ModelSpec::new(0), &ds).unwrap();
        for (k, fit) in &res.fits {
            let spec = ModelSpec::new(*k);
            let l = crate::model::joint_loglik(&spec, &ds, &fit.params).unwrap();
            assert_relative_eq!(l, fit.loglik, max_relative = 1e-9);
            assert_relative_eq!(
                res.ic_values[k],
                -2.0 * l + *k as f64 * lambda,
                max_relative = 1e-9
            );
        }
    }

    #[test]
    fn warm_start_is_monotone() {
        let ds = full(15, 6, 2);
        let opts = SelectOptions {
            warm_start: true,
            ..Default::default()
        };
        let res = select_k(&ModelSpec::new(0), &ds, &[0, 1, 2], &opts).unwrap();
        for k in 0..2 {
            let (a, b) = (res.fits[&k].loglik, res.fits[&(k + 1)].loglik);
            assert!(b >= a - 1e-6 * a.abs(), "K={k}: {a} then {b}");
        }
    }

    #[test]
    fn ties_pick_smaller_k() {
        let mut ic = BTreeMap::new();
        ic.insert(2usize, 5.0);
        ic.insert(3usize, 5.0);
        ic.insert(4usize, 6.0);
        assert_eq!(argmin(&ic), Some(2));
        assert_eq!(argmin(&BTreeMap::new()), None);
        assert!(select_k(
            &ModelSpec::new(0),
            &full(4, 2, 1),
            &[],
            &SelectOptions::default()
        )
        .is_err());
    }
}
