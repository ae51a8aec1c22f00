//! Constrained Newton search for the latent mode and the Laplace
//! approximation of the hyperparameter marginal likelihood.
//!
//! All precisions share one sparsity pattern: the union of the prior
//! precision terms and the outer products of the design rows. The symbolic
//! factorization of that pattern is computed once and reused for every
//! prior factorization and every Newton step.

use super::spec::{Coef, ModelData, ModelSpec, PrecisionTerm};
use crate::error::{Error, Result};
use crate::gmrf::{
    CholeskyFactor, ConstraintSet, CscMatrix, Hyperparameters, KrigingCorrection, SymbolicFactor,
};
use crate::gmrf::dense::DenseCholesky;
use crate::hazard::{expit, softplus};

/// Controls for the inner Newton iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub max_iter: usize,
    /// Convergence threshold on the max-norm of the gradient projected onto
    /// the constraint subspace.
    pub grad_tol: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_iter: 60,
            grad_tol: 1e-8,
        }
    }
}

/// Gaussian approximation of the latent posterior at fixed hyperparameters.
#[derive(Debug, Clone)]
pub struct GaussianApprox {
    pub mode: Vec<f64>,
    /// Values of the posterior precision `Q + A'WA` on the engine pattern.
    pub precision_values: Vec<f64>,
    pub factor: CholeskyFactor,
    pub correction: KrigingCorrection,
    pub iterations: usize,
    pub grad_norm: f64,
    pub log_likelihood: f64,
}

/// Laplace evaluation at one hyperparameter point.
#[derive(Debug, Clone)]
pub struct LaplaceEval {
    pub theta: Vec<f64>,
    pub log_marginal: f64,
    pub approx: GaussianApprox,
}

/// Precomputed structure for repeated Laplace evaluations of one model and
/// data set.
pub struct LaplaceEngine<'a> {
    /// Absent for engines built from a fixed prior precision.
    spec: Option<&'a ModelSpec>,
    data: &'a ModelData,
    n: usize,
    symbolic: SymbolicFactor,
    /// For each precision term, the pattern slot of each entry.
    term_slots: Vec<(PrecisionTerm, Vec<usize>)>,
    /// Slots of the upper-triangle pairs of every design row, row by row in
    /// `(a, b >= a)` order.
    pair_slots: Vec<u32>,
    constraints: ConstraintSet,
    /// Factor of `C C'` for Euclidean projection onto the constraints.
    cct: Option<DenseCholesky>,
    pub options: NewtonOptions,
}

impl<'a> LaplaceEngine<'a> {
    pub fn new(spec: &'a ModelSpec, data: &'a ModelData) -> Result<Self> {
        Self::build(Some(spec), data, spec.precision_terms()?, spec.constraints()?)
    }

    /// An engine for a fixed prior precision `prior` (both triangles) with
    /// no hyperparameters.
    pub fn from_precision(prior: &CscMatrix, data: &'a ModelData, constraints: ConstraintSet) -> Result<Self> {
        let entries = prior.triplets().into_iter().filter(|&(i, j, _)| i <= j).collect();
        Self::build(None, data, vec![PrecisionTerm { coef: Coef::Fixed, entries }], constraints)
    }

    fn build(
        spec: Option<&'a ModelSpec>,
        data: &'a ModelData,
        terms: Vec<PrecisionTerm>,
        constraints: ConstraintSet,
    ) -> Result<Self> {
        let n = data.n_latent;
        if spec.is_some_and(|s| s.n_latent() != n) || constraints.dim() != n {
            return Err(Error::Model("data design does not match the model dimension".into()));
        }
        let mut cols: Vec<Vec<usize>> = vec![Vec::new(); n];
        for i in 0..n {
            cols[i].push(i);
        }
        for t in &terms {
            for &(i, j, _) in &t.entries {
                cols[j.max(i)].push(i.min(j));
            }
        }
        for r in 0..data.n_rows() {
            let (c, _) = data.row(r);
            for (a, &ia) in c.iter().enumerate() {
                for &ib in &c[a..] {
                    cols[ib].push(ia);
                }
            }
        }
        let mut trip = Vec::new();
        for (j, rows) in cols.iter_mut().enumerate() {
            rows.sort_unstable();
            rows.dedup();
            trip.extend(rows.iter().map(|&i| (i, j, 1.0)));
        }
        drop(cols);
        let pattern = CscMatrix::from_triplets(n, n, &trip);
        drop(trip);
        let symbolic = SymbolicFactor::analyze(&pattern)?;
        let (col_ptr, row_idx) = symbolic.pattern();
        let slot = |i: usize, j: usize| -> usize {
            let (i, j) = (i.min(j), i.max(j));
            let base = col_ptr[j];
            base + row_idx[base..col_ptr[j + 1]]
                .binary_search(&i)
                .expect("entry present in pattern")
        };
        let term_slots = terms
            .into_iter()
            .map(|t| {
                let s = t.entries.iter().map(|&(i, j, _)| slot(i, j)).collect();
                (t, s)
            })
            .collect();
        let mut pair_slots = Vec::new();
        for r in 0..data.n_rows() {
            let (c, _) = data.row(r);
            for (a, &ia) in c.iter().enumerate() {
                for &ib in &c[a..] {
                    pair_slots.push(slot(ia, ib) as u32);
                }
            }
        }
        let cct = if constraints.is_empty() {
            None
        } else {
            let c = constraints.n_constraints();
            let dense: Vec<Vec<f64>> = (0..c).map(|r| constraints.dense_row(r)).collect();
            let mut m = vec![0.0; c * c];
            for a in 0..c {
                for b in 0..c {
                    m[a * c + b] = constraints.rows()[a].iter().map(|&(k, v)| v * dense[b][k]).sum();
                }
            }
            Some(DenseCholesky::new(&m, c)?)
        };
        Ok(Self {
            spec,
            data,
            n,
            symbolic,
            term_slots,
            pair_slots,
            constraints,
            cct,
            options: NewtonOptions::default(),
        })
    }

    pub fn spec(&self) -> Option<&ModelSpec> {
        self.spec
    }

    pub fn data(&self) -> &ModelData {
        self.data
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.constraints
    }

    pub fn n_values(&self) -> usize {
        self.symbolic.pattern().1.len()
    }

    /// Prior precision values on the shared pattern. Engines without a
    /// spec ignore `h`.
    pub fn prior_values(&self, h: &Hyperparameters) -> Vec<f64> {
        let mut v = vec![0.0; self.n_values()];
        for (t, slots) in &self.term_slots {
            let c = self.spec.map_or(1.0, |s| s.coefficient(t.coef, h));
            for (&(_, _, e), &s) in t.entries.iter().zip(slots) {
                v[s] += c * e;
            }
        }
        v
    }

    /// A matrix with the shared pattern from its values.
    pub fn to_matrix(&self, values: &[f64]) -> CscMatrix {
        let (col_ptr, row_idx) = self.symbolic.pattern();
        let n = self.n;
        let mut trip = Vec::with_capacity(2 * values.len());
        for j in 0..n {
            for k in col_ptr[j]..col_ptr[j + 1] {
                let i = row_idx[k];
                trip.push((i, j, values[k]));
                if i != j {
                    trip.push((j, i, values[k]));
                }
            }
        }
        CscMatrix::from_triplets(n, n, &trip)
    }

    pub fn factor(&self, values: &[f64]) -> Result<CholeskyFactor> {
        self.symbolic.factor_values(values)
    }

    /// `M x` for a symmetric `M` given by its values on the pattern.
    fn sym_mul(&self, values: &[f64], x: &[f64]) -> Vec<f64> {
        let (col_ptr, row_idx) = self.symbolic.pattern();
        let mut y = vec![0.0; x.len()];
        for j in 0..x.len() {
            for k in col_ptr[j]..col_ptr[j + 1] {
                let i = row_idx[k];
                let v = values[k];
                y[i] += v * x[j];
                if i != j {
                    y[j] += v * x[i];
                }
            }
        }
        y
    }

    /// Euclidean projection onto the constraint subspace.
    fn project(&self, v: &mut [f64]) {
        if let Some(cct) = &self.cct {
            let lam = cct.solve(&self.constraints.apply(v));
            for (r, l) in self.constraints.rows().iter().zip(lam) {
                for &(k, a) in r {
                    v[k] -= a * l;
                }
            }
        }
    }

    fn objective(&self, qv: &[f64], x: &[f64], eta: &[f64]) -> (f64, f64) {
        let ll: f64 = eta
            .iter()
            .zip(self.data.deaths.iter().zip(&self.data.exposure))
            .map(|(&e, (&d, &n))| d * e - n * softplus(e))
            .sum();
        let qx = self.sym_mul(qv, x);
        let quad: f64 = x.iter().zip(&qx).map(|(a, b)| a * b).sum();
        (ll - 0.5 * quad, ll)
    }

    /// Newton iteration for the mode of `log p(y | x) - x'Qx / 2` subject
    /// to the constraints, started from `start` (projected onto the
    /// constraint subspace) or zero.
    pub fn newton(&self, qv: &[f64], start: Option<&[f64]>) -> Result<GaussianApprox> {
        let n = self.n;
        let mut x = match start {
            Some(s) if s.len() == n => s.to_vec(),
            _ => vec![0.0; n],
        };
        self.project(&mut x);
        let mut eta = self.data.predictor(&x);
        let (mut f, mut ll) = self.objective(qv, &x, &eta);
        if !f.is_finite() {
            return Err(Error::NonFinite(format!("objective {f} at the Newton start")));
        }
        let mut trace = Vec::new();
        for it in 0..=self.options.max_iter {
            let mut hv = qv.to_vec();
            let mut resid = Vec::with_capacity(eta.len());
            let mut p = 0usize;
            for (r, &e) in eta.iter().enumerate() {
                let pr = expit(e);
                let nr = self.data.exposure[r];
                resid.push(self.data.deaths[r] - nr * pr);
                let w = nr * pr * (1.0 - pr);
                let (_, vals) = self.data.row(r);
                for a in 0..vals.len() {
                    let wa = w * vals[a];
                    for &vb in &vals[a..] {
                        hv[self.pair_slots[p] as usize] += wa * vb;
                        p += 1;
                    }
                }
            }
            let mut g = self.data.tr_mul(&resid);
            let qx = self.sym_mul(qv, &x);
            for (gi, qi) in g.iter_mut().zip(&qx) {
                *gi -= qi;
            }
            let mut gp = g.clone();
            self.project(&mut gp);
            let gnorm = gp.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            trace.push(gnorm);
            let factor = self.factor(&hv)?;
            let correction = KrigingCorrection::new(&factor, &self.constraints)?;
            if gnorm < self.options.grad_tol {
                return Ok(GaussianApprox {
                    mode: x,
                    precision_values: hv,
                    factor,
                    correction,
                    iterations: it,
                    grad_norm: gnorm,
                    log_likelihood: ll,
                });
            }
            if it == self.options.max_iter {
                break;
            }
            let mut step = factor.solve(&g);
            correction.apply(&mut step);
            let mut t = 1.0;
            let accepted = loop {
                let xn: Vec<f64> = x.iter().zip(&step).map(|(a, b)| a + t * b).collect();
                let en = self.data.predictor(&xn);
                let (fnew, llnew) = self.objective(qv, &xn, &en);
                if fnew.is_finite() && fnew >= f - 1e-12 * (1.0 + f.abs()) {
                    x = xn;
                    eta = en;
                    f = fnew;
                    ll = llnew;
                    break true;
                }
                t *= 0.5;
                if t < 1e-10 {
                    break false;
                }
            };
            if !accepted {
                // No representable ascent left: accept a nearly stationary
                // point, otherwise report the failure.
                if gnorm < self.options.grad_tol.sqrt() {
                    log::debug!("Newton stalled at projected gradient {gnorm:.3e}; accepting");
                    return Ok(GaussianApprox {
                        mode: x,
                        precision_values: hv,
                        factor,
                        correction,
                        iterations: it,
                        grad_norm: gnorm,
                        log_likelihood: ll,
                    });
                }
                break;
            }
        }
        Err(Error::NewtonDivergence {
            iterations: trace.len(),
            trace,
        })
    }


    /// The Gaussian approximation at internal hyperparameters `theta`.
    pub fn inner(&self, theta: &[f64], start: Option<&[f64]>) -> Result<GaussianApprox> {
        self.newton(&self.prior_values(&self.require_spec()?.hyperparameters(theta)?), start)
    }

    /// Laplace approximation of `log p(y)` for the prior with values `qv`:
    /// `log p(y | x*) - x*'Qx*/2 + log|Q|/2 + log|A Q^-1 A'|/2
    ///  - log|H|/2 - log|A H^-1 A'|/2`.
    pub fn laplace(&self, qv: &[f64], start: Option<&[f64]>) -> Result<(f64, GaussianApprox)> {
        let qf = self.factor(qv)?;
        let q_constraint = if self.constraints.is_empty() {
            0.0
        } else {
            KrigingCorrection::new(&qf, &self.constraints)?.log_det()
        };
        let approx = self.newton(qv, start)?;
        let qx = self.sym_mul(qv, &approx.mode);
        let quad: f64 = approx.mode.iter().zip(&qx).map(|(a, b)| a * b).sum();
        let h_constraint = if self.constraints.is_empty() {
            0.0
        } else {
            approx.correction.log_det()
        };
        let lm = approx.log_likelihood - 0.5 * quad + 0.5 * qf.log_det() + 0.5 * q_constraint
            - 0.5 * approx.factor.log_det()
            - 0.5 * h_constraint;
        Ok((lm, approx))
    }

    /// Laplace approximation of `log p(theta | y)` up to a constant.
    pub fn evaluate(&self, theta: &[f64], start: Option<&[f64]>) -> Result<LaplaceEval> {
        let spec = self.require_spec()?;
        let qv = self.prior_values(&spec.hyperparameters(theta)?);
        let (lm, approx) = self.laplace(&qv, start)?;
        let lm = lm + spec.log_prior_theta(theta);
        if !lm.is_finite() {
            return Err(Error::NonFinite(format!("Laplace log marginal {lm} at theta {theta:?}")));
        }
        Ok(LaplaceEval {
            theta: theta.to_vec(),
            log_marginal: lm,
            approx,
        })
    }

    fn require_spec(&self) -> Result<&'a ModelSpec> {
        self.spec
            .ok_or_else(|| Error::Model("engine has no hyperparameters".into()))
    }
}

/// Mode and posterior precision of the latent field at `theta`.
pub fn inner_gaussian_approximation(
    spec: &ModelSpec,
    data: &ModelData,
    theta: &[f64],
) -> Result<(Vec<f64>, CscMatrix)> {
    let engine = LaplaceEngine::new(spec, data)?;
    let approx = engine.inner(theta, None)?;
    let precision = engine.to_matrix(&approx.precision_values);
    Ok((approx.mode, precision))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmrf::testing::dense_solve;
    use crate::model::spec::Variant;
    use crate::model::testing;

    fn scalar_data(d: f64, n: f64, offset: f64) -> ModelData {
        let mut data = ModelData::empty(1);
        data.deaths.push(d);
        data.exposure.push(n);
        data.offset.push(offset);
        data.col_idx.push(0);
        data.values.push(1.0);
        data.row_ptr.push(1);
        data
    }

    #[test]
    fn no_data_gives_zero_mode() {
        let (spec, _) = testing::build(Variant::SpaceTime, 4, 1);
        let empty = ModelData::empty(spec.n_latent());
        let (mode, _) = inner_gaussian_approximation(&spec, &empty, &spec.default_theta()).unwrap();
        assert!(mode.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn scalar_mode_matches_brute_force_newton() {
        let (d, n, o, tau) = (3.0, 40.0, -0.4, 2.5);
        let data = scalar_data(d, n, o);
        let q = CscMatrix::diagonal(&[tau]);
        let mut engine = LaplaceEngine::from_precision(&q, &data, ConstraintSet::empty(1)).unwrap();
        engine.options.grad_tol = 1e-13;
        let approx = engine.newton(&engine.prior_values(&Hyperparameters::default()), None).unwrap();
        let mut x = 0.0f64;
        for _ in 0..100 {
            let p = expit(x + o);
            let g = d - n * p - tau * x;
            let h = n * p * (1.0 - p) + tau;
            x += g / h;
        }
        assert!((approx.mode[0] - x).abs() < 1e-10, "{} vs {x}", approx.mode[0]);
        assert!(approx.grad_norm < 1e-13);
    }

    #[test]
    fn laplace_mean_and_evidence_match_quadrature() {
        let (d, n, tau) = (40.0, 300.0, 1.0);
        let data = scalar_data(d, n, 0.0);
        let q = CscMatrix::diagonal(&[tau]);
        let engine = LaplaceEngine::from_precision(&q, &data, ConstraintSet::empty(1)).unwrap();
        let qv = engine.prior_values(&Hyperparameters::default());
        let (log_ev, approx) = engine.laplace(&qv, None).unwrap();
        // Unnormalized posterior on a fine grid.
        let log_post = |x: f64| d * x - n * softplus(x) - 0.5 * tau * x * x;
        let (a, b, m) = (-12.0, 8.0, 200_000);
        let h = (b - a) / m as f64;
        let top = log_post(approx.mode[0]);
        let (mut z, mut zx) = (0.0, 0.0);
        for i in 0..m {
            let x = a + (i as f64 + 0.5) * h;
            let w = (log_post(x) - top).exp() * h;
            z += w;
            zx += w * x;
        }
        let mean = zx / z;
        assert!(((approx.mode[0] - mean) / mean).abs() < 0.02, "{} vs {mean}", approx.mode[0]);
        // log p(y) = log int p(y|x) N(x; 0, 1/tau) dx
        let exact = top + z.ln() + 0.5 * tau.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        // log_ev omits the 2 pi terms, which cancel between prior and posterior
        assert!((log_ev - exact).abs() < 0.01, "{log_ev} vs {exact}");
    }

    #[test]
    fn mode_solves_the_gaussian_surrogate() {
        // At the mode, the Bernoulli fit is the exact posterior mean of the
        // Gaussian model with working responses z and weights w.
        let (spec, data) = testing::build(Variant::SpaceTime, 5, 3);
        let theta = spec.default_theta();
        let engine = LaplaceEngine::new(&spec, &data).unwrap();
        let approx = engine.inner(&theta, None).unwrap();
        let x = &approx.mode;
        let n = x.len();
        let q = spec.precision(&spec.hyperparameters(&theta).unwrap()).unwrap().to_dense();
        let eta = data.predictor(x);
        let mut h = q.clone();
        let mut rhs = vec![0.0; n];
        for r in 0..data.n_rows() {
            let p = expit(eta[r]);
            let w = data.exposure[r] * p * (1.0 - p);
            let z = eta[r] - data.offset[r] + (data.deaths[r] - data.exposure[r] * p) / w;
            let (c, v) = data.row(r);
            for (a, &ia) in c.iter().enumerate() {
                rhs[ia] += v[a] * w * z;
                for (b, &ib) in c.iter().enumerate() {
                    h[ia][ib] += w * v[a] * v[b];
                }
            }
        }
        let cons = spec.constraints().unwrap();
        let k = cons.n_constraints();
        let mut kkt = vec![vec![0.0; n + k]; n + k];
        for i in 0..n {
            kkt[i][..n].copy_from_slice(&h[i]);
        }
        for (r, row) in cons.rows().iter().enumerate() {
            for &(j, a) in row {
                kkt[n + r][j] = a;
                kkt[j][n + r] = a;
            }
        }
        rhs.extend(std::iter::repeat(0.0).take(k));
        let sol = dense_solve(&kkt, &rhs);
        let err = x.iter().zip(&sol).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
        assert!(cons.max_abs_residual(x) < 1e-10);
        // The returned precision is Q + A'WA.
        let hm = engine.to_matrix(&approx.precision_values).to_dense();
        let perr = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| (hm[i][j] - h[i][j]).abs())
            .fold(0.0, f64::max);
        assert!(perr < 1e-8, "{perr}");
    }

    #[test]
    fn newton_budget_exhaustion_reports_the_trace() {
        let (spec, data) = testing::build(Variant::M2, 5, 4);
        let mut engine = LaplaceEngine::new(&spec, &data).unwrap();
        engine.options.max_iter = 1;
        match engine.inner(&spec.default_theta(), None) {
            Err(Error::NewtonDivergence { iterations, trace }) => {
                assert_eq!(iterations, 2);
                assert_eq!(trace.len(), 2);
            }
            other => panic!("expected divergence, got {:?}", other.map(|a| a.iterations)),
        }
    }

    #[test]
    fn warm_start_reaches_the_same_mode() {
        let (spec, data) = testing::build(Variant::M4, 6, 5);
        let engine = LaplaceEngine::new(&spec, &data).unwrap();
        let t = spec.default_theta();
        let cold = engine.evaluate(&t, None).unwrap();
        let start = testing::random_latent(spec.n_latent(), 0.2, 1);
        let warm = engine.evaluate(&t, Some(&start)).unwrap();
        assert!((cold.log_marginal - warm.log_marginal).abs() < 1e-8);
        let d = cold.approx.mode.iter().zip(&warm.approx.mode).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d < 1e-7);
    }
}
