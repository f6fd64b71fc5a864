//! Identifiability transforms.
//!
//! Both transforms leave every natural parameter `η_ijt` unchanged. The
//! coefficient-only transform enforces `ΘᵀX = 0`; the full transform also
//! enforces `AᵀA/J = I`, diagonal `ΘᵀΘ/N` with nonincreasing entries, and
//! `Θᵀ1 = 0` (dropped under linear-in-time intercepts). With time-varying
//! loadings the loading conditions apply to the first period's block.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg::{gram_inverse, smallest_eigenvalue, sym_power};
use crate::model::{Layout, ParameterSet};

fn check_shapes(layout: &Layout, params: &ParameterSet, covariates: &DMatrix<f64>) -> Result<()> {
    if covariates.ncols() != layout.n_covariates || covariates.nrows() != params.theta.nrows() {
        return Err(Error::Config(format!(
            "covariates are {}x{}, expected {}x{}",
            covariates.nrows(),
            covariates.ncols(),
            params.theta.nrows(),
            layout.n_covariates
        )));
    }
    if params.item_params.ncols() != layout.len() || params.theta.ncols() != layout.n_factors {
        return Err(Error::Config(
            "parameter shapes do not match the layout".into(),
        ));
    }
    if layout.time_varying_loadings && !layout.time_varying_coefficients && layout.n_covariates > 0
    {
        return Err(Error::Config(
            "time-varying loadings with static coefficients cannot be normalized without changing η".into(),
        ));
    }
    Ok(())
}

/// Projects `Θ` onto the orthogonal complement of `design`'s columns and
/// returns the projected factors together with the regression weights
/// `(DᵀD)⁻¹DᵀΘ`.
fn project_out(
    theta: &DMatrix<f64>,
    design: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if design.ncols() == 0 {
        return Ok((theta.clone(), DMatrix::zeros(0, theta.ncols())));
    }
    let inv = gram_inverse(design)?;
    let weights = &inv * design.transpose() * theta;
    let resid = theta - design * &weights;
    Ok((resid, weights))
}

/// Moves the part of `ΘA_tᵀ` explained by `design` into the intercepts
/// (when `intercept_row` is set) and the coefficients.
fn absorb(layout: &Layout, items: &mut DMatrix<f64>, weights: &DMatrix<f64>, intercept_row: bool) {
    let p = layout.n_covariates;
    let off = usize::from(intercept_row);
    let loading_blocks = layout.loading_blocks();
    for block in 0..loading_blocks {
        let t_rep = block; // first time using this loading block
        let a = items
            .columns(layout.a_offset(t_rep), layout.n_factors)
            .into_owned();
        let shift = weights * a.transpose(); // (off + p) x J
                                             // times sharing this loading block
        let times: Vec<usize> = if layout.time_varying_loadings {
            vec![block]
        } else {
            (0..layout.n_times).collect()
        };
        if intercept_row {
            let mut gamma_done = vec![false; layout.gamma_len()];
            for &t in &times {
                let g = layout.gamma_index(t);
                if gamma_done[g] {
                    continue;
                }
                gamma_done[g] = true;
                for j in 0..items.nrows() {
                    items[(j, g)] += shift[(0, j)];
                }
            }
        }
        let mut beta_done = vec![false; layout.beta_blocks()];
        for &t in &times {
            let start = layout.beta_offset(t);
            let b = (start - layout.beta_start()) / p.max(1);
            if p == 0 || beta_done[b] {
                continue;
            }
            beta_done[b] = true;
            for j in 0..items.nrows() {
                for l in 0..p {
                    items[(j, start + l)] += shift[(off + l, j)];
                }
            }
        }
    }
}

/// Enforces `ΘᵀX = 0` by moving `X(XᵀX)⁻¹XᵀΘ Aᵀ` into the coefficients.
pub fn normalize_beta_only(
    layout: &Layout,
    params: &ParameterSet,
    covariates: &DMatrix<f64>,
) -> Result<ParameterSet> {
    check_shapes(layout, params, covariates)?;
    if layout.n_covariates == 0 || layout.n_factors == 0 {
        return Ok(params.clone());
    }
    let (theta, weights) = project_out(&params.theta, covariates)?;
    let mut out = params.clone();
    absorb(layout, &mut out.item_params, &weights, false);
    out.theta = theta;
    Ok(out)
}

/// Full identifiability transform; returns the new parameters and the rotation `H`
/// with `Θ̂ = Θ̃H⁻¹` and `Â = AHᵀ`.
pub fn normalize_full(
    layout: &Layout,
    params: &ParameterSet,
    covariates: &DMatrix<f64>,
) -> Result<(ParameterSet, DMatrix<f64>)> {
    check_shapes(layout, params, covariates)?;
    let k = layout.n_factors;
    if k == 0 {
        return Ok((params.clone(), DMatrix::zeros(0, 0)));
    }
    let n = params.theta.nrows() as f64;
    let j_count = params.item_params.nrows() as f64;

    let with_intercept = !layout.linear_intercept;
    let design = if with_intercept {
        let mut d = DMatrix::from_element(covariates.nrows(), covariates.ncols() + 1, 1.0);
        d.columns_mut(1, covariates.ncols()).copy_from(covariates);
        d
    } else {
        covariates.clone()
    };
    let (theta_tilde, weights) = project_out(&params.theta, &design)?;
    let mut out = params.clone();
    if design.ncols() > 0 {
        absorb(layout, &mut out.item_params, &weights, with_intercept);
    }

    let a1 = out.item_params.columns(layout.a_offset(0), k).into_owned();
    let sigma_a = a1.transpose() * &a1 / j_count;
    let smallest = smallest_eigenvalue(&sigma_a);
    if !(smallest > 1e-12) {
        return Err(Error::NearSingular { smallest });
    }
    let sigma_t = theta_tilde.transpose() * &theta_tilde / n;
    let root = sym_power(&sigma_a, 0.5, 1e-12);
    let inv_root = sym_power(&sigma_a, -0.5, 1e-12);
    let m = &root * sigma_t * &root;
    let eig = SymmetricEigen::new((&m + m.transpose()) * 0.5);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vecs = DMatrix::from_fn(k, k, |r, c| eig.eigenvectors[(r, order[c])]);
    for w in order.windows(2) {
        if (eig.eigenvalues[w[0]] - eig.eigenvalues[w[1]]).abs() < 1e-10 {
            log::warn!("factor covariance eigenvalues are not separated; factors are not individually identified");
        }
    }

    let mut h = vecs.transpose() * &inv_root;
    let mut h_inv = &root * &vecs;
    let mut theta_hat = &theta_tilde * &h_inv;
    let mut blocks: Vec<DMatrix<f64>> = (0..layout.loading_blocks())
        .map(|b| out.item_params.columns(layout.a_start() + b * k, k) * h.transpose())
        .collect();

    // sign: the largest-magnitude entry of each first-period loading column is positive
    for c in 0..k {
        let col = blocks[0].column(c);
        let pivot = col.iter().cloned().fold(
            0.0f64,
            |best, v| if v.abs() > best.abs() { v } else { best },
        );
        if pivot < 0.0 {
            theta_hat.column_mut(c).neg_mut();
            for b in blocks.iter_mut() {
                b.column_mut(c).neg_mut();
            }
            h.row_mut(c).neg_mut();
            h_inv.column_mut(c).neg_mut();
        }
    }

    for (b, block) in blocks.iter().enumerate() {
        out.item_params
            .columns_mut(layout.a_start() + b * k, k)
            .copy_from(block);
    }
    out.theta = theta_hat;
    Ok((out, h))
}
