//! Linear equality constraints `A x = 0` on a latent vector.

use super::dense::DenseCholesky;
use super::knots::KnotSchedule;
use super::mesh::SpatialMesh;
use crate::error::{Error, Result};

/// Constraint rows stored sparsely as `(index, coefficient)` lists.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConstraintSet {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl ConstraintSet {
    pub fn empty(n: usize) -> Self {
        Self { n, rows: Vec::new() }
    }

    /// Builds the set, rejecting linearly dependent rows.
    pub fn new(n: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        for row in &rows {
            if let Some(&(i, _)) = row.iter().find(|(i, _)| *i >= n) {
                return Err(Error::Gmrf(format!("constraint index {i} out of range {n}")));
            }
        }
        let set = Self { n, rows };
        if !set.rows.is_empty() {
            // A A' must be positive definite for independent rows
            let c = set.rows.len();
            let mut scaled = set.clone();
            for row in &mut scaled.rows {
                let norm = row.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::Gmrf("constraint row is identically zero".into()));
                }
                row.iter_mut().for_each(|(_, v)| *v /= norm);
            }
            let mut gram = vec![0.0; c * c];
            for i in 0..c {
                let dense_i = scaled.dense_row(i);
                for j in 0..c {
                    gram[i * c + j] = scaled.rows[j].iter().map(|&(k, v)| v * dense_i[k]).sum();
                }
            }
            DenseCholesky::new(&gram, c)
                .map_err(|_| Error::Gmrf("constraint rows are linearly dependent".into()))?;
        }
        Ok(set)
    }

    /// One row `sum_{i in range} x_i = 0`.
    pub fn sum_to_zero(n: usize, range: std::ops::Range<usize>) -> Result<Self> {
        Self::new(n, vec![range.map(|i| (i, 1.0)).collect()])
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn n_constraints(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn dense_row(&self, r: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for &(i, v) in &self.rows[r] {
            out[i] += v;
        }
        out
    }

    /// Re-indexes into a larger vector of length `total` at `offset`.
    pub fn embed(&self, offset: usize, total: usize) -> Result<Self> {
        if offset + self.n > total {
            return Err(Error::Gmrf("embedded constraints exceed the target dimension".into()));
        }
        Ok(Self {
            n: total,
            rows: self
                .rows
                .iter()
                .map(|r| r.iter().map(|&(i, v)| (i + offset, v)).collect())
                .collect(),
        })
    }

    /// Concatenates sets defined on the same vector.
    pub fn stack(sets: &[ConstraintSet]) -> Result<Self> {
        let Some(first) = sets.first() else {
            return Err(Error::Gmrf("no constraint sets to stack".into()));
        };
        if sets.iter().any(|s| s.n != first.n) {
            return Err(Error::Gmrf("stacked constraint sets differ in dimension".into()));
        }
        Self::new(first.n, sets.iter().flat_map(|s| s.rows.clone()).collect())
    }

    /// `A x`
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        self.rows
            .iter()
            .map(|r| r.iter().map(|&(i, v)| v * x[i]).sum())
            .collect()
    }

    pub fn max_abs_residual(&self, x: &[f64]) -> f64 {
        self.apply(x).into_iter().map(f64::abs).fold(0.0, f64::max)
    }
}

/// Population-weighted integrate-to-zero constraints for a space-time field
/// laid out knot-major over `mesh` nodes: for each knot `k`,
/// `sum_s d(s) area(s) u(k, s) = 0`.
pub fn population_constraints(
    mesh: &SpatialMesh,
    density: &[f64],
    knots: &KnotSchedule,
) -> Result<ConstraintSet> {
    let n_s = mesh.n_nodes();
    if density.len() != n_s {
        return Err(Error::Gmrf(format!(
            "density has {} values but the mesh has {n_s} nodes",
            density.len()
        )));
    }
    if density.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
        return Err(Error::Domain("population density must be finite and nonnegative".into()));
    }
    let total: f64 = density.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Domain("population density is identically zero".into()));
    }
    // Cell areas are equal on the regular mesh, so dividing by the total mass
    // leaves the constraint unchanged and keeps coefficients O(1/n).
    let weights: Vec<(usize, f64)> = density
        .iter()
        .enumerate()
        .filter(|(_, d)| **d > 0.0)
        .map(|(s, d)| (s, d / total))
        .collect();
    let rows = (0..knots.len())
        .map(|k| weights.iter().map(|&(s, w)| (k * n_s + s, w)).collect())
        .collect();
    ConstraintSet::new(knots.len() * n_s, rows)
}
