//! Dense symmetric linear algebra shared by the estimator stages.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

const EIGEN_MAX_ITER: usize = 10_000;

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// descending order and a deterministic sign per eigenvector.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: DVector<f64>,
    /// Orthonormal eigenvectors stored column-wise, aligned with `values`.
    pub vectors: DMatrix<f64>,
}

pub fn sym_eigen(a: &DMatrix<f64>) -> Result<SymEigen> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::shape(format!("{n}x{n}"), format!("{}x{}", a.nrows(), a.ncols())));
    }
    if n == 0 {
        return Ok(SymEigen {
            values: DVector::zeros(0),
            vectors: DMatrix::zeros(0, 0),
        });
    }
    let eig =
        SymmetricEigen::try_new(a.clone(), f64::EPSILON, EIGEN_MAX_ITER).ok_or(Error::EigenFailure { tau: None })?;
    let mut order: Vec<usize> = (0..n).collect();
    // total_cmp keeps the ordering deterministic even for ties
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));

    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        fix_sign(&mut col);
        vectors.set_column(dst, &col);
    }
    Ok(SymEigen { values, vectors })
}

/// Flip `v` so that its first non-negligible coordinate is positive.
pub fn fix_sign(v: &mut DVector<f64>) {
    let scale = v.amax();
    if scale == 0.0 {
        return;
    }
    if let Some(first) = v.iter().copied().find(|x| x.abs() > 1e-12 * scale) {
        if first < 0.0 {
            v.neg_mut();
        }
    }
}

/// Average `a` with its transpose. The result is bitwise symmetric.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

pub fn is_exactly_symmetric(a: &DMatrix<f64>) -> bool {
    a.is_square() && (0..a.nrows()).all(|i| (0..i).all(|j| a[(i, j)] == a[(j, i)]))
}

/// `A A^T`, forced bitwise symmetric.
pub fn gram_outer(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = a * a.transpose();
    symmetrize(&mut g);
    g
}

/// Positive-definiteness test: succeeds iff a Cholesky factorisation of
/// `A - tol * I` exists, i.e. `lambda_min(A) > tol` up to rounding.
pub fn is_positive_definite(a: &DMatrix<f64>, tol: f64) -> bool {
    let mut shifted = a.clone();
    for i in 0..shifted.nrows() {
        shifted[(i, i)] -= tol;
    }
    Cholesky::new(shifted).is_some()
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> Result<f64> {
    let eig = sym_eigen(a)?;
    Ok(eig.values.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Number of eigenvalues above `rel_tol * lambda_max` in absolute value.
pub fn numerical_rank(a: &DMatrix<f64>, rel_tol: f64) -> Result<usize> {
    let eig = sym_eigen(a)?;
    let top = eig.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if top == 0.0 {
        return Ok(0);
    }
    Ok(eig.values.iter().filter(|v| v.abs() > rel_tol * top).count())
}

/// Largest absolute entry.
pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Symmetric PSD reconstruction `V diag(f(lambda)) V^T`.
pub fn spectral_map(eig: &SymEigen, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let n = eig.values.len();
    let mut scaled = eig.vectors.clone();
    for j in 0..n {
        let s = f(eig.values[j]);
        scaled.column_mut(j).scale_mut(s);
    }
    let mut out = scaled * eig.vectors.transpose();
    symmetrize(&mut out);
    out
}
