//! Precision matrices for the temporal and IID building blocks, plus the
//! separable space-time Kronecker product.

use super::sparse::CscMatrix;
use crate::error::{Error, Result};

/// A symmetric positive semidefinite precision `Q = scale * R` with a
/// structure matrix `R` whose null space has dimension `rank_deficiency`.
#[derive(Debug, Clone)]
pub struct SparsePrecisionBlock {
    pub matrix: CscMatrix,
    pub rank_deficiency: usize,
}

impl SparsePrecisionBlock {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank_deficiency == 0
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("standard deviation must be positive, got {sigma}")))
    }
}

/// Structure matrix `D'D` of a random walk of order `order` (1 or 2) on `t`
/// equally spaced points.
pub fn random_walk_structure(t: usize, order: usize) -> Result<CscMatrix> {
    let stencil: &[f64] = match order {
        1 => &[-1.0, 1.0],
        2 => &[1.0, -2.0, 1.0],
        _ => return Err(Error::Gmrf(format!("random walk order {order} not supported"))),
    };
    if t <= order {
        return Err(Error::Gmrf(format!(
            "RW{order} needs at least {} time points, got {t}",
            order + 1
        )));
    }
    let mut trip = Vec::new();
    for r in 0..t - order {
        for (a, &ca) in stencil.iter().enumerate() {
            for (b, &cb) in stencil.iter().enumerate() {
                trip.push((r + a, r + b, ca * cb));
            }
        }
    }
    Ok(CscMatrix::from_triplets(t, t, &trip))
}

/// RW2 precision `sigma^{-2} D'D` with `D` the second-difference operator.
pub fn rw2_precision(t: usize, sigma: f64) -> Result<SparsePrecisionBlock> {
    check_sigma(sigma)?;
    Ok(SparsePrecisionBlock {
        matrix: random_walk_structure(t, 2)?.scaled(sigma.powi(-2)),
        rank_deficiency: 2,
    })
}

/// RW1 precision `sigma^{-2} D'D` with first differences.
pub fn rw1_precision(t: usize, sigma: f64) -> Result<SparsePrecisionBlock> {
    check_sigma(sigma)?;
    Ok(SparsePrecisionBlock {
        matrix: random_walk_structure(t, 1)?.scaled(sigma.powi(-2)),
        rank_deficiency: 1,
    })
}

pub fn iid_precision(n: usize, sigma: f64) -> Result<SparsePrecisionBlock> {
    check_sigma(sigma)?;
    if n == 0 {
        return Err(Error::Gmrf("IID block of dimension 0".into()));
    }
    Ok(SparsePrecisionBlock {
        matrix: CscMatrix::diagonal(&vec![sigma.powi(-2); n]),
        rank_deficiency: 0,
    })
}

/// Stationary AR(1) with unit marginal variance: `Cov(x_i, x_j) = rho^{|i-j|}`.
pub fn ar1_precision(t: usize, rho: f64) -> Result<SparsePrecisionBlock> {
    if !(rho.abs() < 1.0) {
        return Err(Error::Domain(format!("AR(1) requires |rho| < 1, got {rho}")));
    }
    if t == 0 {
        return Err(Error::Gmrf("AR(1) block of dimension 0".into()));
    }
    let s = 1.0 / (1.0 - rho * rho);
    let mut trip = Vec::with_capacity(3 * t);
    for i in 0..t {
        let interior = i > 0 && i + 1 < t;
        let d = if interior { 1.0 + rho * rho } else { 1.0 };
        trip.push((i, i, s * d));
        if i + 1 < t && rho != 0.0 {
            trip.push((i, i + 1, -s * rho));
            trip.push((i + 1, i, -s * rho));
        }
    }
    Ok(SparsePrecisionBlock {
        matrix: CscMatrix::from_triplets(t, t, &trip),
        rank_deficiency: 0,
    })
}

/// `Q_T ⊗ Q_S`, ordered time-major and space-minor: entry `(k, s)` sits at
/// `k * n_s + s`.
pub fn separable_st_precision(
    q_t: &SparsePrecisionBlock,
    q_s: &SparsePrecisionBlock,
) -> Result<SparsePrecisionBlock> {
    if !q_t.is_full_rank() || !q_s.is_full_rank() {
        return Err(Error::Gmrf(
            "separable space-time precision requires full-rank factors".into(),
        ));
    }
    Ok(SparsePrecisionBlock {
        matrix: q_t.matrix.kron(&q_s.matrix),
        rank_deficiency: 0,
    })
}
