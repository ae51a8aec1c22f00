//! Dense helpers used only by unit tests.

use faer::linalg::solvers::DenseSolveCore;
use faer::{Mat, Side};

use super::sparse::CscMatrix;

pub fn dense(m: &CscMatrix) -> Mat<f64> {
    let d = m.to_dense();
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| d[i][j])
}

pub fn dense_inverse(m: &CscMatrix) -> Vec<Vec<f64>> {
    let a = dense(m);
    let inv = a.partial_piv_lu().inverse();
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| inv[(i, j)]).collect())
        .collect()
}

pub fn min_eigenvalue(m: &CscMatrix) -> f64 {
    let ev = dense(m).self_adjoint_eigenvalues(Side::Lower).unwrap();
    ev[0]
}

pub fn dense_log_det(m: &CscMatrix) -> f64 {
    let ev = dense(m).self_adjoint_eigenvalues(Side::Lower).unwrap();
    ev.iter().map(|v| v.ln()).sum()
}

/// Solves the dense system `a x = b` by LU.
pub fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let m = Mat::from_fn(n, n, |i, j| a[i][j]);
    let inv = m.partial_piv_lu().inverse();
    (0..n).map(|i| (0..n).map(|j| inv[(i, j)] * b[j]).sum()).collect()
}
