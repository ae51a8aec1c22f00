//! Gaussian sampling from a sparse precision, with exact linear constraints
//! enforced by conditioning by kriging:
//! `x* = x - Q^{-1} A' (A Q^{-1} A')^{-1} (A x - e)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::cholesky::CholeskyFactor;
use super::constraints::ConstraintSet;
use super::dense::DenseCholesky;
use super::sparse::CscMatrix;
use crate::error::{Error, Result};

/// Precomputed pieces of the kriging correction for one factorization.
#[derive(Debug, Clone)]
pub struct KrigingCorrection {
    constraints: ConstraintSet,
    /// `Q^{-1} A'`, column-major `n x c`.
    q_inv_at: Vec<f64>,
    /// Factor of `A Q^{-1} A'`.
    s: DenseCholesky,
    n: usize,
}

impl KrigingCorrection {
    pub fn new(factor: &CholeskyFactor, constraints: &ConstraintSet) -> Result<Self> {
        let n = factor.dim();
        let c = constraints.n_constraints();
        if constraints.dim() != n {
            return Err(Error::Gmrf(format!(
                "constraints on dimension {} but precision has dimension {n}",
                constraints.dim()
            )));
        }
        let mut w = vec![0.0; n * c];
        for r in 0..c {
            for &(i, v) in &constraints.rows()[r] {
                w[r * n + i] += v;
            }
        }
        factor.solve_many_in_place(&mut w, c);
        let mut s = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                s[i * c + j] = constraints.rows()[i]
                    .iter()
                    .map(|&(k, v)| v * w[j * n + k])
                    .sum();
            }
        }
        // symmetrize against round-off
        for i in 0..c {
            for j in 0..i {
                let m = 0.5 * (s[i * c + j] + s[j * c + i]);
                s[i * c + j] = m;
                s[j * c + i] = m;
            }
        }
        let s = DenseCholesky::new(&s, c)
            .map_err(|e| Error::Gmrf(format!("A Q^-1 A' is singular: {e}")))?;
        Ok(Self {
            constraints: constraints.clone(),
            q_inv_at: w,
            s,
            n,
        })
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.constraints
    }

    /// `log |A Q^{-1} A'|`
    pub fn log_det(&self) -> f64 {
        self.s.log_det()
    }

    /// Projects `x` onto `A x = target` in place.
    pub fn apply_with_target(&self, x: &mut [f64], target: &[f64]) {
        let n = x.len();
        let c = self.constraints.n_constraints();
        if c == 0 {
            return;
        }
        // A second pass removes the round-off left by the first.
        for _ in 0..2 {
            let mut r = self.constraints.apply(x);
            for (ri, t) in r.iter_mut().zip(target) {
                *ri -= t;
            }
            let lam = self.s.solve(&r);
            for (j, l) in lam.iter().enumerate() {
                let col = &self.q_inv_at[j * n..(j + 1) * n];
                for (xi, wi) in x.iter_mut().zip(col) {
                    *xi -= wi * l;
                }
            }
        }
    }

    pub fn apply(&self, x: &mut [f64]) {
        let zeros = vec![0.0; self.constraints.n_constraints()];
        self.apply_with_target(x, &zeros);
    }

    /// Per-coordinate change in variance due to the constraints, the diagonal
    /// of `-Q^{-1} A' S^{-1} A Q^{-1}`.
    pub fn variance_correction(&self) -> Vec<f64> {
        let c = self.constraints.n_constraints();
        let n = self.n;
        let mut out = vec![0.0; n];
        if c == 0 {
            return out;
        }
        let mut row = vec![0.0; c];
        for (i, o) in out.iter_mut().enumerate() {
            for j in 0..c {
                row[j] = self.q_inv_at[j * n + i];
            }
            let y = self.s.solve_lower(&row);
            *o = -y.iter().map(|v| v * v).sum::<f64>();
        }
        out
    }
}

/// Draws from `N(mean, Q^{-1})` conditioned on `A x = 0` (when given),
/// reusing an existing factorization.
pub fn sample_with_factor(
    factor: &CholeskyFactor,
    correction: Option<&KrigingCorrection>,
    mean: Option<&[f64]>,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let n = factor.dim();
    let mut out = Vec::with_capacity(n_samples);
    let mut z = vec![0.0; n];
    for _ in 0..n_samples {
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(rng);
        }
        let mut x = factor.sample_from_standard(&z);
        if let Some(k) = correction {
            k.apply(&mut x);
        }
        if let Some(m) = mean {
            for (xi, mi) in x.iter_mut().zip(m) {
                *xi += mi;
            }
        }
        out.push(x);
    }
    out
}

/// Zero-mean samples from the precision `q`, conditioned on `constraints`.
pub fn sample_constrained(
    q: &CscMatrix,
    constraints: Option<&ConstraintSet>,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let factor = CholeskyFactor::new(q)?;
    let correction = match constraints {
        Some(c) if !c.is_empty() => Some(KrigingCorrection::new(&factor, c)?),
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_with_factor(&factor, correction.as_ref(), None, n_samples, &mut rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmrf::testing::dense_inverse;

    fn empirical_cov(samples: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = samples[0].len();
        let m = samples.len() as f64;
        let mean: Vec<f64> = (0..n).map(|i| samples.iter().map(|s| s[i]).sum::<f64>() / m).collect();
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| samples.iter().map(|s| (s[i] - mean[i]) * (s[j] - mean[j])).sum::<f64>() / m)
                    .collect()
            })
            .collect()
    }

    #[test]
    fn centered_iid_samples() {
        let n = 4;
        let q = CscMatrix::identity(n);
        let a = ConstraintSet::sum_to_zero(n, 0..n).unwrap();
        let s = sample_constrained(&q, Some(&a), 50_000, 3).unwrap();
        for x in &s {
            assert!(x.iter().sum::<f64>().abs() < 1e-10);
        }
        let cov = empirical_cov(&s);
        for i in 0..n {
            for j in 0..n {
                let expected = if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64;
                assert!((cov[i][j] - expected).abs() < 0.03, "{i},{j}: {}", cov[i][j]);
            }
        }
    }

    #[test]
    fn unconstrained_covariance_matches_inverse() {
        let q = CscMatrix::from_triplets(
            3,
            3,
            &[(0, 0, 2.0), (1, 1, 3.0), (2, 2, 1.5), (0, 1, -0.8), (1, 0, -0.8), (1, 2, 0.5), (2, 1, 0.5)],
        );
        let s = sample_constrained(&q, None, 100_000, 9).unwrap();
        let cov = empirical_cov(&s);
        let truth = dense_inverse(&q);
        for i in 0..3 {
            for j in 0..3 {
                let se = ((truth[i][i] * truth[j][j] + truth[i][j].powi(2)) / 100_000f64).sqrt();
                assert!((cov[i][j] - truth[i][j]).abs() < 4.0 * se);
            }
        }
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let q = CscMatrix::identity(5);
        let a = sample_constrained(&q, None, 3, 42).unwrap();
        let b = sample_constrained(&q, None, 3, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn variance_correction_matches_dense_formula() {
        let q = CscMatrix::from_triplets(3, 3, &[(0, 0, 2.0), (1, 1, 1.0), (2, 2, 4.0), (0, 2, 0.5), (2, 0, 0.5)]);
        let a = ConstraintSet::new(3, vec![vec![(0, 1.0), (1, 2.0), (2, 1.0)]]).unwrap();
        let f = CholeskyFactor::new(&q).unwrap();
        let k = KrigingCorrection::new(&f, &a).unwrap();
        let sigma = dense_inverse(&q);
        let w: Vec<f64> = (0..3).map(|i| sigma[i][0] + 2.0 * sigma[i][1] + sigma[i][2]).collect();
        let s = w[0] + 2.0 * w[1] + w[2];
        for (i, c) in k.variance_correction().iter().enumerate() {
            assert!((c + w[i] * w[i] / s).abs() < 1e-12);
        }
        assert!((k.log_det() - s.ln()).abs() < 1e-12);
    }
}
