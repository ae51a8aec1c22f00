//! Sparse Cholesky factorization of symmetric positive definite precisions.
//!
//! Backed by the supernodal factorization in `faer`. The symbolic analysis
//! (fill-reducing ordering and elimination structure) is computed once per
//! sparsity pattern and shared by every numeric factorization with that
//! pattern, which is what the inner Newton loop and the hyperparameter search
//! rely on.

use std::sync::Arc;

use faer::dyn_stack::{MemBuffer, MemStack, StackReq};
use faer::linalg::cholesky::llt::factor::LltRegularization;
use faer::sparse::linalg::cholesky::{
    factorize_symbolic_cholesky, simplicial::SymbolicSimplicialCholesky, supernodal::SupernodalLltRef,
    CholeskySymbolicParams, LltRef,
    SymbolicCholesky, SymbolicCholeskyRaw, SymmetricOrdering,
};
use faer::sparse::linalg::SupernodalThreshold;
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Conj, MatMut, Par, Side};

use super::sparse::CscMatrix;
use crate::error::{Error, Result};

/// Symbolic analysis of a sparsity pattern.
#[derive(Debug, Clone)]
pub struct SymbolicFactor {
    inner: Arc<SymbolicCholesky<usize>>,
    pattern_col_ptr: Arc<Vec<usize>>,
    pattern_row_idx: Arc<Vec<usize>>,
    n: usize,
}

impl SymbolicFactor {
    /// Analyzes the pattern of the upper triangle of `matrix`.
    ///
    /// `matrix` may hold the full symmetric matrix or just its upper triangle;
    /// only entries with `row <= col` are used.
    pub fn analyze(matrix: &CscMatrix) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::Gmrf("cholesky requires a square matrix".into()));
        }
        let upper = matrix.upper();
        let n = upper.nrows();
        let symbolic = SymbolicSparseColMatRef::new_checked(n, n, upper.col_ptr(), None, upper.row_idx());
        let params = CholeskySymbolicParams {
            supernodal_flop_ratio_threshold: SupernodalThreshold::FORCE_SUPERNODAL,
            ..Default::default()
        };
        let inner = factorize_symbolic_cholesky(symbolic, Side::Upper, SymmetricOrdering::Amd, params)
            .map_err(|e| Error::Gmrf(format!("symbolic cholesky failed: {e:?}")))?;
        Ok(Self {
            inner: Arc::new(inner),
            pattern_col_ptr: Arc::new(upper.col_ptr().to_vec()),
            pattern_row_idx: Arc::new(upper.row_idx().to_vec()),
            n,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Numerically factors `matrix`, whose upper-triangle pattern must be
    /// contained in the analyzed one.
    pub fn factor(&self, matrix: &CscMatrix) -> Result<CholeskyFactor> {
        let upper = matrix.upper();
        if upper.nrows() != self.n {
            return Err(Error::Gmrf(format!(
                "matrix dimension {} does not match symbolic dimension {}",
                upper.nrows(),
                self.n
            )));
        }
        // Scatter onto the analyzed pattern so that the numeric phase always
        // sees the exact structure the symbolic phase was built for.
        let mut values = vec![0.0; self.pattern_row_idx.len()];
        for j in 0..self.n {
            let base = self.pattern_col_ptr[j];
            let rows = &self.pattern_row_idx[base..self.pattern_col_ptr[j + 1]];
            for (i, v) in upper.col(j) {
                match rows.binary_search(&i) {
                    Ok(k) => values[base + k] = v,
                    Err(_) => {
                        return Err(Error::Gmrf(format!(
                            "entry ({i}, {j}) is outside the analyzed sparsity pattern"
                        )))
                    }
                }
            }
        }
        self.factor_values(&values)
    }

    /// Upper-triangle pattern `(col_ptr, row_idx)` of the analyzed matrix.
    pub fn pattern(&self) -> (&[usize], &[usize]) {
        (&self.pattern_col_ptr[..], &self.pattern_row_idx[..])
    }

    /// Numerically factors a matrix given by its values on [`Self::pattern`].
    pub fn factor_values(&self, values: &[f64]) -> Result<CholeskyFactor> {
        if values.len() != self.pattern_row_idx.len() {
            return Err(Error::Gmrf(format!(
                "expected {} pattern values, got {}",
                self.pattern_row_idx.len(),
                values.len()
            )));
        }
        let sym = SymbolicSparseColMatRef::new_checked(
            self.n,
            self.n,
            &self.pattern_col_ptr[..],
            None,
            &self.pattern_row_idx[..],
        );
        let a = SparseColMatRef::new(sym, values);

        let mut l_values = vec![0.0; self.inner.len_val()];
        let req = self
            .inner
            .factorize_numeric_llt_scratch::<f64>(Par::Seq, Default::default());
        let mut mem = MemBuffer::new(req);
        let stack = MemStack::new(&mut mem);
        self.inner
            .factorize_numeric_llt(
                &mut l_values,
                a,
                Side::Upper,
                LltRegularization::default(),
                Par::Seq,
                stack,
                Default::default(),
            )
            .map_err(|e| Error::NotPositiveDefinite(format!("{e:?}")))?;
        let log_det = log_det_from_values(&self.inner, &l_values)?;
        Ok(CholeskyFactor {
            symbolic: Arc::clone(&self.inner),
            l_values,
            log_det,
            n: self.n,
        })
    }
}

fn log_det_from_values(symbolic: &SymbolicCholesky<usize>, l_values: &[f64]) -> Result<f64> {
    let mut acc = 0.0;
    let mut push = |d: f64, at: usize| {
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite(format!("pivot {d} at {at}")));
        }
        acc += d.ln();
        Ok(())
    };
    match symbolic.raw() {
        SymbolicCholeskyRaw::Supernodal(sn) => {
            let llt = SupernodalLltRef::new(sn, l_values);
            for s in 0..sn.n_supernodes() {
                let block = llt.supernode(s).val();
                for k in 0..block.ncols() {
                    push(block[(k, k)], s)?;
                }
            }
        }
        SymbolicCholeskyRaw::Simplicial(sp) => {
            for j in 0..sp.ncols() {
                push(simplicial_diag(sp, l_values, j), j)?;
            }
        }
    }
    Ok(2.0 * acc)
}

fn simplicial_diag(sp: &SymbolicSimplicialCholesky<usize>, l_values: &[f64], j: usize) -> f64 {
    let (col_ptr, row_idx) = (sp.col_ptr(), sp.row_idx());
    (col_ptr[j]..col_ptr[j + 1])
        .find(|&k| row_idx[k] == j)
        .map_or(0.0, |k| l_values[k])
}

/// Numeric factor `P Q P' = L L'` of a positive definite matrix.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    symbolic: Arc<SymbolicCholesky<usize>>,
    l_values: Vec<f64>,
    log_det: f64,
    n: usize,
}

impl CholeskyFactor {
    /// One-shot analysis plus factorization.
    pub fn new(matrix: &CscMatrix) -> Result<Self> {
        SymbolicFactor::analyze(matrix)?.factor(matrix)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// `log |Q|`
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Solves `Q x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        let llt = LltRef::new(&self.symbolic, &self.l_values);
        let req = self.symbolic.solve_in_place_scratch::<f64>(1, Par::Seq);
        let mut mem = MemBuffer::new(req);
        let stack = MemStack::new(&mut mem);
        let rhs = MatMut::from_column_major_slice_mut(b, self.n, 1);
        llt.solve_in_place_with_conj(Conj::No, rhs, Par::Seq, stack);
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// Solves for several right-hand sides stored column-major in `b`.
    pub fn solve_many_in_place(&self, b: &mut [f64], ncols: usize) {
        assert_eq!(b.len(), self.n * ncols);
        if ncols == 0 {
            return;
        }
        let llt = LltRef::new(&self.symbolic, &self.l_values);
        let req = self.symbolic.solve_in_place_scratch::<f64>(ncols, Par::Seq);
        let mut mem = MemBuffer::new(req);
        let stack = MemStack::new(&mut mem);
        let rhs = MatMut::from_column_major_slice_mut(b, self.n, ncols);
        llt.solve_in_place_with_conj(Conj::No, rhs, Par::Seq, stack);
    }

    /// Maps standard normal `z` to a draw from `N(0, Q^{-1})`, i.e.
    /// `x = P' L^{-T} z`.
    pub fn sample_from_standard(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.n);
        let mut work = z.to_vec();
        match self.symbolic.raw() {
            SymbolicCholeskyRaw::Supernodal(sn) => {
                let llt = SupernodalLltRef::new(sn, &self.l_values);
                let req = StackReq::any_of(&[sn.solve_in_place_scratch::<f64>(1, Par::Seq)]);
                let mut mem = MemBuffer::new(req);
                let stack = MemStack::new(&mut mem);
                llt.l_transpose_solve_with_conj(
                    Conj::No,
                    MatMut::from_column_major_slice_mut(&mut work, self.n, 1),
                    Par::Seq,
                    stack,
                );
            }
            SymbolicCholeskyRaw::Simplicial(sp) => {
                // back substitution with L' using the columns of L
                let (col_ptr, row_idx) = (sp.col_ptr(), sp.row_idx());
                for j in (0..self.n).rev() {
                    let mut acc = work[j];
                    let mut diag = 0.0;
                    for k in col_ptr[j]..col_ptr[j + 1] {
                        let i = row_idx[k];
                        if i == j {
                            diag = self.l_values[k];
                        } else {
                            acc -= self.l_values[k] * work[i];
                        }
                    }
                    work[j] = acc / diag;
                }
            }
        }
        match self.symbolic.perm() {
            Some(perm) => {
                let (fwd, _) = perm.arrays();
                let mut x = vec![0.0; self.n];
                for (i, &orig) in fwd.iter().enumerate() {
                    x[orig] = work[i];
                }
                x
            }
            None => work,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiag(n: usize) -> CscMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 4.0));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        CscMatrix::from_triplets(n, n, &t)
    }

    #[test]
    fn solve_and_log_det_match_small_dense() {
        let q = tridiag(3);
        let f = CholeskyFactor::new(&q).unwrap();
        // det of [[4,-1,0],[-1,4,-1],[0,-1,4]] = 4*15 - (-1)(-4) = 56
        assert!((f.log_det() - 56f64.ln()).abs() < 1e-12);
        let b = [1.0, 2.0, 3.0];
        let x = f.solve(&b);
        let back = q.mul_vec(&x);
        for (u, v) in back.iter().zip(b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_transform_has_inverse_covariance() {
        // x = P' L^{-T} z  =>  x' Q x = z' z for every z
        let q = tridiag(6);
        let f = CholeskyFactor::new(&q).unwrap();
        let z = [0.3, -1.2, 0.7, 2.0, -0.4, 0.1];
        let x = f.sample_from_standard(&z);
        let lhs = q.quad_form(&x);
        let rhs: f64 = z.iter().map(|v| v * v).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn symbolic_reuse_accepts_subset_pattern() {
        let q = tridiag(5);
        let sym = SymbolicFactor::analyze(&q).unwrap();
        let d = CscMatrix::diagonal(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let f = sym.factor(&d).unwrap();
        assert!((f.log_det() - 120f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let m = CscMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)]);
        assert!(CholeskyFactor::new(&m).is_err());
    }
}
