//! Starting values for [`crate::fit`].
//!
//! [`svd_init`] builds a low-rank logit surface from the signed response
//! matrices and reads factors and loadings off its leading singular vectors.
//! It needs binary items; [`random_init`] works for every family.

use nalgebra::{DMatrix, DVector, SVD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{fit_item_subset, item_radius, CellRows, FitOptions};
use crate::family::{logit, Family};
use crate::model::{Dataset, ModelSpec, ParameterSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitOptions {
    /// Clipping tolerance for the inverse link.
    pub epsilon: f64,
    /// Newton iterations for the covariate coefficients of each item.
    pub coefficient_iterations: usize,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions {
            epsilon: 0.01,
            coefficient_iterations: 25,
        }
    }
}

impl InitOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config("epsilon must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Thin SVD with singular values in descending order.
///
/// Wide matrices are decomposed through their transpose.
fn sorted_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let (u, s, v) = if m.nrows() >= m.ncols() {
        let svd = SVD::new(m.clone(), true, true);
        (
            svd.u.unwrap(),
            svd.singular_values,
            svd.v_t.unwrap().transpose(),
        )
    } else {
        let svd = SVD::new(m.transpose(), true, true);
        (
            svd.v_t.unwrap().transpose(),
            svd.singular_values,
            svd.u.unwrap(),
        )
    };
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let u = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let v = DMatrix::from_fn(v.nrows(), order.len(), |r, c| v[(r, order[c])]);
    (u, order.iter().map(|&i| s[i]).collect(), v)
}

/// Rank-`K̃` reconstruction with `K̃ = max(K + 1, #{σ_k ≥ threshold})`.
fn truncate(l: &DMatrix<f64>, k: usize, threshold: f64) -> DMatrix<f64> {
    let (u, s, v) = sorted_svd(l);
    let above = s.iter().filter(|&&x| x >= threshold).count();
    if above == 0 {
        log::info!(
            "no singular value reaches {threshold:.3}; keeping {} components",
            k + 1
        );
    }
    let rank = (k + 1).max(above).min(s.len());
    let mut out = DMatrix::zeros(l.nrows(), l.ncols());
    for c in 0..rank {
        out += u.column(c) * v.column(c).transpose() * s[c];
    }
    out
}

/// Clipped inverse link applied to a reconstructed sign entry.
#[inline]
pub(crate) fn clipped_logit(l: f64, epsilon: f64) -> f64 {
    logit((0.5 * (l + 1.0)).clamp(epsilon, 1.0 - epsilon))
}

/// Sign matrix `L_t`: `2y − 1` on observed slices, zero elsewhere.
fn sign_matrix(dataset: &Dataset, t: usize) -> DMatrix<f64> {
    DMatrix::from_fn(dataset.n_persons(), dataset.n_items(), |i, j| {
        if dataset.is_observed(i, t) {
            2.0 * dataset.response(i, j, t) - 1.0
        } else {
            0.0
        }
    })
}

/// SVD-based starting values for binary items.
pub fn svd_init(spec: &ModelSpec, dataset: &Dataset, opts: &InitOptions) -> Result<ParameterSet> {
    opts.validate()?;
    if let Some((item, &family)) = dataset
        .families()
        .iter()
        .enumerate()
        .find(|(_, f)| **f != Family::Bernoulli)
    {
        return Err(Error::UnsupportedInit { item, family });
    }
    let layout = spec.layout(dataset)?;
    let (n, n_items, n_times, k) = (
        dataset.n_persons(),
        dataset.n_items(),
        dataset.n_times(),
        spec.n_factors,
    );
    let nf = n as f64;
    let p_hat: Vec<f64> = (0..n_times)
        .map(|t| (0..n).filter(|&i| dataset.is_observed(i, t)).count() as f64 / nf)
        .collect();

    // M_t, the clipped logit surfaces
    let m: Vec<DMatrix<f64>> = if layout.time_varying_loadings {
        let mut stacked = DMatrix::zeros(n, n_items * n_times);
        for t in 0..n_times {
            stacked
                .columns_mut(t * n_items, n_items)
                .copy_from(&sign_matrix(dataset, t));
        }
        let p_bar = p_hat.iter().sum::<f64>() / n_times as f64;
        let lt = truncate(&stacked, k, 2.0 * nf.sqrt() * p_bar);
        (0..n_times)
            .map(|t| {
                lt.columns(t * n_items, n_items)
                    .map(|v| clipped_logit(v, opts.epsilon))
            })
            .collect()
    } else {
        (0..n_times)
            .map(|t| {
                truncate(&sign_matrix(dataset, t), k, 2.0 * nf.sqrt() * p_hat[t])
                    .map(|v| clipped_logit(v, opts.epsilon))
            })
            .collect()
    };

    // intercepts and the centred surface
    let mut params = ParameterSet::zeros(n, n_items, &layout);
    let gamma_eff: Vec<DVector<f64>> = if layout.linear_intercept {
        let denom = nf * (1..=n_times).map(|t| (t * t) as f64).sum::<f64>();
        let g = DVector::from_fn(n_items, |j, _| {
            (0..n_times)
                .map(|t| (t + 1) as f64 * m[t].column(j).sum())
                .sum::<f64>()
                / denom
        });
        params.item_params.column_mut(0).copy_from(&g);
        (0..n_times).map(|t| &g * (t + 1) as f64).collect()
    } else {
        (0..n_times)
            .map(|t| {
                let g = DVector::from_fn(n_items, |j, _| m[t].column(j).sum() / nf);
                params.item_params.column_mut(t).copy_from(&g);
                g
            })
            .collect()
    };
    let centred = |t: usize| {
        let mut c = m[t].clone();
        for mut row in c.row_iter_mut() {
            row -= gamma_eff[t].transpose();
        }
        c
    };

    if k > 0 {
        let m_tilde = if layout.time_varying_loadings {
            let mut s = DMatrix::zeros(n, n_items * n_times);
            for t in 0..n_times {
                s.columns_mut(t * n_items, n_items).copy_from(&centred(t));
            }
            s
        } else {
            let mut s = DMatrix::zeros(n, n_items);
            for t in 0..n_times {
                s += centred(t);
            }
            s / n_times as f64
        };
        let (q, sigma, h) = sorted_svd(&m_tilde);
        let kk = k.min(sigma.len());
        for c in 0..kk {
            params
                .theta
                .column_mut(c)
                .copy_from(&(q.column(c) * nf.sqrt()));
            let a = h.column(c) * (sigma[c] / nf.sqrt());
            for b in 0..layout.loading_blocks() {
                let col = layout.a_start() + b * k + c;
                params
                    .item_params
                    .column_mut(col)
                    .copy_from(&a.rows(b * n_items, n_items));
            }
        }
    }

    // coefficients with everything else held at its start
    let free: Vec<usize> = (layout.beta_start()..layout.a_start()).collect();
    if !free.is_empty() {
        let rows = CellRows::build(&layout, dataset, &params.theta_rows());
        let radius = item_radius(spec, &layout);
        let fit_opts = FitOptions::default();
        for j in 0..n_items {
            let mut u: Vec<f64> = params.item_params.row(j).iter().cloned().collect();
            fit_item_subset(
                &layout,
                dataset,
                &rows,
                j,
                &mut u,
                &free,
                radius,
                opts.coefficient_iterations,
                &fit_opts,
            )?;
            for &f in &free {
                params.item_params[(j, f)] = u[f];
            }
        }
    }
    Ok(params)
}

/// Factors and loadings uniform on `[-0.5, 0.5]`, everything else zero.
pub fn random_init(spec: &ModelSpec, dataset: &Dataset, seed: u64) -> Result<ParameterSet> {
    let layout = spec.layout(dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::zeros(dataset.n_persons(), dataset.n_items(), &layout);
    for i in 0..dataset.n_persons() {
        for k in 0..layout.n_factors {
            params.theta[(i, k)] = rng.gen_range(-0.5..=0.5);
        }
    }
    for j in 0..dataset.n_items() {
        for c in layout.a_start()..layout.len() {
            params.item_params[(j, c)] = rng.gen_range(-0.5..=0.5);
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy(n: usize, j: usize, t: usize, p: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = (0..n * j * t)
            .map(|_| f64::from(rng.gen_bool(0.4)))
            .collect();
        let obs: Vec<bool> = (0..n * t)
            .map(|c| c % t == 0 || rng.gen_bool(0.6))
            .collect();
        let x = DMatrix::from_fn(n, p, |_, _| rng.gen_range(-1.0..1.0));
        Dataset::new(n, j, t, y, obs, x, None, vec![Family::Bernoulli; j]).unwrap()
    }

    #[test]
    fn sign_mapping() {
        let ds = Dataset::new(
            2,
            2,
            2,
            vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0],
            vec![true, true, false, true],
            DMatrix::zeros(2, 0),
            None,
            vec![Family::Bernoulli; 2],
        )
        .unwrap();
        assert_eq!(
            sign_matrix(&ds, 0),
            DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.0, 0.0])
        );
        assert_eq!(
            sign_matrix(&ds, 1),
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, -1.0])
        );
    }

    #[test]
    fn clipping_values() {
        assert_relative_eq!(
            clipped_logit(1.5, 0.01),
            (0.99f64 / 0.01).ln(),
            epsilon = 1e-12
        );
        assert_relative_eq!(clipped_logit(1.5, 0.01), 4.59511985013459, epsilon = 1e-12);
        assert_eq!(clipped_logit(0.0, 0.01), 0.0);
        let lo = logit(0.01);
        for l in [-3.0, -1.0, -0.99, -0.5, 0.3, 0.98, 0.99, 1.0, 7.0] {
            let v = clipped_logit(l, 0.01);
            assert!(v >= lo && v <= -lo);
        }
    }

    #[test]
    fn svd_init_shapes_for_every_variant() {
        let ds = toy(30, 8, 3, 2, 1);
        for v in crate::model::Variant::ALL {
            if v == crate::model::Variant::TimeCovariates {
                continue;
            }
            let spec = ModelSpec::from_variant(v, 2);
            let p = svd_init(&spec, &ds, &InitOptions::default()).unwrap();
            let layout = spec.layout(&ds).unwrap();
            p.check(&ds, &layout).unwrap();
            assert!(p
                .item_params
                .iter()
                .chain(p.theta.iter())
                .all(|v| v.is_finite()));
            // Θ columns have norm √N
            assert_relative_eq!(p.theta.column(0).norm(), 30f64.sqrt(), epsilon = 1e-9);
        }
    }

    #[test]
    fn svd_init_wide_data() {
        let ds = toy(6, 15, 2, 0, 2);
        let p = svd_init(&ModelSpec::new(2), &ds, &InitOptions::default()).unwrap();
        assert_eq!(p.theta.shape(), (6, 2));
        assert!(p.item_params.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn svd_init_rejects_counts() {
        let ds = Dataset::new(
            2,
            1,
            1,
            vec![3.0, 0.0],
            vec![true; 2],
            DMatrix::zeros(2, 0),
            None,
            vec![Family::Poisson],
        )
        .unwrap();
        assert!(matches!(
            svd_init(&ModelSpec::new(1), &ds, &InitOptions::default()),
            Err(Error::UnsupportedInit {
                item: 0,
                family: Family::Poisson
            })
        ));
    }

    #[test]
    fn random_init_determinism() {
        let ds = toy(10, 4, 2, 1, 3);
        let spec = ModelSpec::new(2);
        let a = random_init(&spec, &ds, 7).unwrap();
        assert_eq!(a, random_init(&spec, &ds, 7).unwrap());
        assert_ne!(a.theta, random_init(&spec, &ds, 8).unwrap().theta);
        assert!(a.theta.iter().all(|v| v.abs() <= 0.5));
        let layout = spec.layout(&ds).unwrap();
        for j in 0..4 {
            for c in 0..layout.a_start() {
                assert_eq!(a.item_params[(j, c)], 0.0);
            }
        }
        let z = random_init(&ModelSpec::new(0), &ds, 7).unwrap();
        assert!(z.item_params.iter().all(|&v| v == 0.0));
    }
}
