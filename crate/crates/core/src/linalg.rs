use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Condition numbers above this are treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Symmetrizes `(a + a') / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Inverse of a symmetric matrix through its eigen-decomposition.
///
/// Fails when `max |lambda| / min |lambda|` exceeds [`MAX_CONDITION`].
pub fn sym_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(symmetrize(a));
    let cond = condition_number(&eig.eigenvalues);
    if !(cond <= MAX_CONDITION) {
        return Err(Error::Singular { cond });
    }
    let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
    Ok(symmetrize(&(&eig.eigenvectors * inv_diag * eig.eigenvectors.transpose())))
}

pub fn condition_number(eigenvalues: &DVector<f64>) -> f64 {
    let max = eigenvalues.iter().fold(0.0f64, |m, l| m.max(l.abs()));
    let min = eigenvalues.iter().fold(f64::INFINITY, |m, l| m.min(l.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(symmetrize(a)).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Solves `a x = b` for symmetric positive definite `a` by Cholesky,
/// retrying once with a `1e-8` ridge.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(b));
    }
    let ridged = a + DMatrix::identity(a.nrows(), a.ncols()) * 1e-8;
    ridged.cholesky().map(|ch| ch.solve(b)).ok_or(Error::Separation)
}

/// `tr(a b)` without forming the product.
pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let mut t = 0.0;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            t += a[(i, k)] * b[(k, i)];
        }
    }
    t
}
