use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Solves `(h + λI) x = g` for symmetric positive semi-definite `h`,
/// raising `λ` tenfold from `ridge` up to `1e-2` until the Cholesky factor exists.
pub(crate) fn damped_solve(h: &DMatrix<f64>, g: &DVector<f64>, ridge: f64) -> Option<DVector<f64>> {
    let n = h.nrows();
    let mut lambda = ridge;
    loop {
        let mut m = h.clone();
        for d in 0..n {
            m[(d, d)] += lambda;
        }
        if let Some(chol) = m.cholesky() {
            let x = chol.solve(g);
            if x.iter().all(|v| v.is_finite()) {
                return Some(x);
            }
        }
        if lambda >= 1e-2 {
            return None;
        }
        lambda = if lambda > 0.0 {
            (lambda * 10.0).min(1e-2)
        } else {
            1e-12
        };
    }
}

/// `m^power` for a symmetric positive semi-definite matrix, with eigenvalues floored at `floor`.
pub(crate) fn sym_power(m: &DMatrix<f64>, power: f64, floor: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let vals = eig.eigenvalues.map(|v| v.max(floor).powf(power));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Inverse of a symmetric positive definite matrix; fails with the smallest eigenvalue otherwise.
pub(crate) fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = symmetrize(m);
    let smallest = smallest_eigenvalue(&sym);
    let largest = sym.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1e-300);
    if !(smallest > 1e-12 * largest) {
        return Err(Error::NearSingular { smallest });
    }
    match sym.clone().cholesky() {
        Some(c) => Ok(c.inverse()),
        None => Err(Error::NearSingular { smallest }),
    }
}

pub(crate) fn smallest_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Columns of `x` that are numerically dependent on earlier columns.
pub(crate) fn dependent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut bad = Vec::new();
    for c in 0..x.ncols() {
        let col = x.column(c).into_owned();
        let scale = col.norm();
        let mut r = col.clone();
        // two passes of modified Gram-Schmidt
        for _ in 0..2 {
            for q in &basis {
                let proj = q.dot(&r);
                r -= q * proj;
            }
        }
        let rn = r.norm();
        if scale == 0.0 || rn <= 1e-10 * scale.max(1.0) {
            bad.push(c);
        } else {
            basis.push(r / rn);
        }
    }
    bad
}

/// `(XᵀX)⁻¹`, or a rank-deficiency error naming the dependent columns.
pub(crate) fn gram_inverse(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let bad = dependent_columns(x);
    if !bad.is_empty() {
        return Err(Error::RankDeficient { columns: bad });
    }
    let g = x.transpose() * x;
    g.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(Error::RankDeficient {
            columns: Vec::new(),
        })
}
