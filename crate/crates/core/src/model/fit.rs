//! Empirical-Bayes fitting: Nelder-Mead ascent of the Laplace marginal over
//! the hyperparameters, an optional axis grid around the mode, and posterior
//! samples of the latent field.

use std::collections::BTreeMap;
use std::sync::Mutex;

use argmin::core::{CostFunction, Executor, State, TerminationReason, TerminationStatus};
use argmin::solver::neldermead::NelderMead;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::laplace::{LaplaceEngine, LaplaceEval, NewtonOptions};
use super::spec::{HyperKind, ModelData, ModelSpec};
use crate::error::{Error, Result};
use crate::gmrf::{sample_with_factor, CscMatrix, Hyperparameters};

/// Axis-aligned integration grid around the mode: `steps` points on each
/// side of every free hyperparameter, spaced `spacing` approximate posterior
/// standard deviations apart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub steps: usize,
    pub spacing: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub newton: NewtonOptions,
    /// Hyperparameters held at a natural-scale value instead of estimated.
    pub fixed: BTreeMap<HyperKind, f64>,
    /// Internal starting point; defaults to [`ModelSpec::default_theta`].
    pub start: Option<Vec<f64>>,
    pub max_iters: u64,
    /// Stop when the standard deviation of the simplex values falls below
    /// this many log units.
    pub tolerance: f64,
    /// Initial simplex edge on the internal scale.
    pub initial_step: f64,
    /// Fail instead of warning when `max_iters` is reached.
    pub require_convergence: bool,
    pub grid: Option<GridSpec>,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            newton: NewtonOptions::default(),
            fixed: BTreeMap::new(),
            start: None,
            max_iters: 400,
            tolerance: 1e-3,
            initial_step: 0.7,
            require_convergence: false,
            grid: None,
            n_samples: 500,
            seed: 1,
        }
    }
}

/// One integration point.
#[derive(Debug, Clone)]
pub struct GridPoint {
    pub theta: Vec<f64>,
    pub log_marginal: f64,
    pub weight: f64,
    pub mode: Vec<f64>,
    pub precision: CscMatrix,
}

/// Serializable summary of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub theta_names: Vec<String>,
    pub theta_mode: Vec<f64>,
    pub free: Vec<bool>,
    pub hyperparameters: Hyperparameters,
    pub log_marginal: f64,
    pub grid_theta: Vec<Vec<f64>>,
    pub grid_log_marginal: Vec<f64>,
    pub grid_weights: Vec<f64>,
    pub evaluations: usize,
    pub converged: bool,
    pub n_samples: usize,
    pub max_constraint_residual: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub summary: FitSummary,
    pub grid: Vec<GridPoint>,
    /// Latent samples; `sample_point[i]` is the grid point sample `i` came from.
    pub samples: Vec<Vec<f64>>,
    pub sample_point: Vec<usize>,
}

impl FitResult {
    pub fn hyperparameters(&self) -> &Hyperparameters {
        &self.summary.hyperparameters
    }

    /// Posterior mean of the latent field, mixing grid-point modes by weight.
    pub fn latent_mean(&self) -> Vec<f64> {
        let n = self.grid[0].mode.len();
        let mut m = vec![0.0; n];
        for g in &self.grid {
            for (mi, xi) in m.iter_mut().zip(&g.mode) {
                *mi += g.weight * xi;
            }
        }
        m
    }
}

struct Objective<'e, 'a> {
    engine: &'e LaplaceEngine<'a>,
    free: Vec<usize>,
    base: Vec<f64>,
    bounds: Vec<(f64, f64)>,
    warm: Mutex<Option<Vec<f64>>>,
    best: Mutex<(f64, Vec<f64>)>,
    count: Mutex<usize>,
}

impl Objective<'_, '_> {
    fn full(&self, p: &[f64]) -> Vec<f64> {
        let mut t = self.base.clone();
        for (&i, &v) in self.free.iter().zip(p) {
            t[i] = v;
        }
        t
    }

    fn eval(&self, p: &[f64]) -> Option<LaplaceEval> {
        let theta = self.full(p);
        if theta
            .iter()
            .zip(&self.bounds)
            .any(|(t, (lo, hi))| !(t >= lo && t <= hi))
        {
            return None;
        }
        let warm = self.warm.lock().unwrap().clone();
        let n = {
            let mut c = self.count.lock().unwrap();
            *c += 1;
            *c
        };
        match self.engine.evaluate(&theta, warm.as_deref()) {
            Ok(ev) => {
                log::info!(
                    "theta point {n}: log marginal {:.4}, newton iterations {}",
                    ev.log_marginal,
                    ev.approx.iterations
                );
                let mut best = self.best.lock().unwrap();
                if ev.log_marginal > best.0 {
                    *best = (ev.log_marginal, theta);
                    *self.warm.lock().unwrap() = Some(ev.approx.mode.clone());
                }
                Some(ev)
            }
            Err(e) => {
                log::debug!("theta point {n} failed: {e}");
                None
            }
        }
    }
}

/// Negative log marginal, infinite where the approximation fails.
struct Problem<'o, 'e, 'a>(&'o Objective<'e, 'a>);

impl CostFunction for Problem<'_, '_, '_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.0.eval(p).map_or(f64::INFINITY, |e| -e.log_marginal))
    }
}

/// Fits `spec` to `data`.
pub fn fit(spec: &ModelSpec, data: &ModelData, options: &FitOptions) -> Result<FitResult> {
    if data.is_empty() {
        return Err(Error::Model("cannot fit a model without data".into()));
    }
    let mut engine = LaplaceEngine::new(spec, data)?;
    engine.options = options.newton;
    let mut base = match &options.start {
        Some(s) if s.len() == spec.hyper.len() => s.clone(),
        Some(s) => {
            return Err(Error::Model(format!(
                "start has {} hyperparameters, the model has {}",
                s.len(),
                spec.hyper.len()
            )))
        }
        None => spec.default_theta(),
    };
    for (&k, &v) in &options.fixed {
        let i = spec.hyper.iter().position(|&h| h == k).ok_or_else(|| {
            Error::Model(format!("fixed hyperparameter {} is not part of the model", k.name()))
        })?;
        base[i] = k.to_internal(v)?;
    }
    let free: Vec<usize> = (0..spec.hyper.len())
        .filter(|i| !options.fixed.contains_key(&spec.hyper[*i]))
        .collect();
    let objective = Objective {
        engine: &engine,
        free: free.clone(),
        base: base.clone(),
        bounds: spec.theta_bounds(),
        warm: Mutex::new(None),
        best: Mutex::new((f64::NEG_INFINITY, base.clone())),
        count: Mutex::new(0),
    };
    let p0: Vec<f64> = free.iter().map(|&i| base[i]).collect();
    if objective.eval(&p0).is_none() {
        let err = engine.evaluate(&base, None).err();
        return Err(Error::OptimizerFailure {
            reason: format!(
                "Laplace approximation failed at the starting point: {}",
                err.map_or_else(|| "outside bounds".to_string(), |e| e.to_string())
            ),
            best_theta: base,
            best_value: f64::NEG_INFINITY,
        });
    }

    let mut converged = true;
    let theta_mode = if free.is_empty() {
        base.clone()
    } else {
        let mut simplex = vec![p0.clone()];
        for k in 0..p0.len() {
            let mut v = p0.clone();
            v[k] += options.initial_step;
            simplex.push(v);
        }
        let solver = NelderMead::new(simplex)
            .with_sd_tolerance(options.tolerance)
            .map_err(|e| Error::Model(format!("optimizer setup: {e}")))?;
        let run = Executor::new(Problem(&objective), solver)
            .configure(|s| s.max_iters(options.max_iters))
            .run();
        let (best_value, best_theta) = objective.best.lock().unwrap().clone();
        match run {
            Ok(res) => {
                let status = res.state().get_termination_status().clone();
                if let TerminationStatus::Terminated(TerminationReason::MaxItersReached) = status {
                    converged = false;
                    if options.require_convergence {
                        return Err(Error::OptimizerFailure {
                            reason: format!("no convergence in {} iterations", options.max_iters),
                            best_theta,
                            best_value,
                        });
                    }
                    log::warn!("hyperparameter search stopped after {} iterations", options.max_iters);
                }
            }
            Err(e) => {
                return Err(Error::OptimizerFailure {
                    reason: e.to_string(),
                    best_theta,
                    best_value,
                })
            }
        }
        best_theta
    };
    if !objective.best.lock().unwrap().0.is_finite() {
        return Err(Error::OptimizerFailure {
            reason: "no finite Laplace evaluation".into(),
            best_theta: theta_mode,
            best_value: f64::NEG_INFINITY,
        });
    }
    let warm = objective.warm.lock().unwrap().clone();
    let evaluations = *objective.count.lock().unwrap();
    let center = engine.evaluate(&theta_mode, warm.as_deref())?;

    let mut points = vec![center];
    if let Some(g) = options.grid.filter(|g| g.steps > 0 && !free.is_empty()) {
        // Curvature along each free axis sets the spacing.
        let h = 0.3;
        let probe: Vec<(usize, f64)> = free.iter().flat_map(|&i| [(i, h), (i, -h)]).collect();
        let probed: Vec<Option<LaplaceEval>> = probe
            .par_iter()
            .map(|&(i, d)| {
                let mut t = theta_mode.clone();
                t[i] += d;
                engine.evaluate(&t, Some(&points[0].approx.mode)).ok()
            })
            .collect();
        let f0 = points[0].log_marginal;
        let mut offsets = Vec::new();
        for (k, &i) in free.iter().enumerate() {
            let sd = match (&probed[2 * k], &probed[2 * k + 1]) {
                (Some(a), Some(b)) => {
                    let curv = -(a.log_marginal - 2.0 * f0 + b.log_marginal) / (h * h);
                    if curv > 1e-8 {
                        curv.sqrt().recip().min(2.0)
                    } else {
                        0.5
                    }
                }
                _ => 0.5,
            };
            for s in 1..=g.steps {
                for sign in [1.0, -1.0] {
                    offsets.push((i, sign * s as f64 * g.spacing * sd));
                }
            }
        }
        let extra: Vec<LaplaceEval> = offsets
            .par_iter()
            .filter_map(|&(i, d)| {
                let mut t = theta_mode.clone();
                t[i] += d;
                match engine.evaluate(&t, Some(&points[0].approx.mode)) {
                    Ok(e) => Some(e),
                    Err(err) => {
                        log::warn!("grid point dropped: {err}");
                        None
                    }
                }
            })
            .collect();
        points.extend(extra);
    }
    let top = points.iter().map(|p| p.log_marginal).fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = points.iter().map(|p| (p.log_marginal - top).exp()).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();

    // Largest-remainder allocation of samples to grid points.
    let n = options.n_samples;
    let mut counts: Vec<usize> = weights.iter().map(|w| (w * n as f64).floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = weights[a] * n as f64 - counts[a] as f64;
        let rb = weights[b] * n as f64 - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle().take(order.len() * 2) {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    let drawn: Vec<Vec<Vec<f64>>> = points
        .par_iter()
        .zip(counts.par_iter())
        .enumerate()
        .map(|(k, (p, &c))| {
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed.wrapping_add(k as u64 * 0x9E37_79B9));
            sample_with_factor(&p.approx.factor, Some(&p.approx.correction), Some(&p.approx.mode), c, &mut rng)
        })
        .collect();
    let mut samples = Vec::with_capacity(n);
    let mut sample_point = Vec::with_capacity(n);
    for (k, s) in drawn.into_iter().enumerate() {
        sample_point.extend(std::iter::repeat(k).take(s.len()));
        samples.extend(s);
    }
    let constraints = engine.constraints();
    let max_res = samples
        .iter()
        .map(|s| constraints.max_abs_residual(s))
        .fold(0.0f64, f64::max);

    let summary = FitSummary {
        theta_names: spec.hyper.iter().map(|k| k.name().to_string()).collect(),
        theta_mode: theta_mode.clone(),
        free: (0..spec.hyper.len()).map(|i| free.contains(&i)).collect(),
        hyperparameters: spec.hyperparameters(&theta_mode)?,
        log_marginal: points[0].log_marginal,
        grid_theta: points.iter().map(|p| p.theta.clone()).collect(),
        grid_log_marginal: points.iter().map(|p| p.log_marginal).collect(),
        grid_weights: weights.clone(),
        evaluations,
        converged,
        n_samples: samples.len(),
        max_constraint_residual: max_res,
    };
    let grid = points
        .into_iter()
        .zip(weights)
        .map(|(p, w)| GridPoint {
            precision: engine.to_matrix(&p.approx.precision_values),
            theta: p.theta,
            log_marginal: p.log_marginal,
            weight: w,
            mode: p.approx.mode,
        })
        .collect();
    Ok(FitResult {
        summary,
        grid,
        samples,
        sample_point,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::spec::{SpecConfig, SpecInputs, Variant};
    use crate::model::testing;

    fn quick() -> FitOptions {
        FitOptions {
            max_iters: 60,
            n_samples: 50,
            ..FitOptions::default()
        }
    }

    #[test]
    fn fit_produces_weighted_constrained_samples() {
        let (spec, data) = testing::build(Variant::M2, 8, 1);
        let opts = FitOptions {
            grid: Some(GridSpec { steps: 1, spacing: 1.0 }),
            ..quick()
        };
        let r = fit(&spec, &data, &opts).unwrap();
        let w: f64 = r.summary.grid_weights.iter().sum();
        assert!((w - 1.0).abs() < 1e-12);
        assert_eq!(r.grid.len(), 1 + 2 * spec.hyper.len());
        assert_eq!(r.samples.len(), 50);
        assert!(r.summary.max_constraint_residual < 1e-8);
        // the mode is the best point seen
        assert!(r.summary.grid_log_marginal.iter().all(|&l| l <= r.summary.log_marginal + 1e-6));
        let counts = (0..r.grid.len()).map(|k| r.sample_point.iter().filter(|&&p| p == k).count());
        for (c, g) in counts.zip(&r.grid) {
            assert!((c as f64 - 50.0 * g.weight).abs() <= 1.0);
        }
    }

    #[test]
    fn fixed_hyperparameters_are_held() {
        let (spec, data) = testing::build(Variant::M2, 6, 2);
        let mut opts = quick();
        opts.fixed.insert(HyperKind::SurveyPrecision, 0.25);
        opts.fixed.insert(HyperKind::SpatialRange, 1.5);
        let r = fit(&spec, &data, &opts).unwrap();
        assert!((r.hyperparameters().sigma_survey.unwrap() - 0.25).abs() < 1e-12);
        assert!((r.hyperparameters().spatial.unwrap().0 - 1.5).abs() < 1e-12);
        assert_eq!(r.summary.free.iter().filter(|f| !**f).count(), 2);
        opts.fixed.insert(HyperKind::StRho, 0.5);
        assert!(fit(&spec, &data, &opts).is_err());
    }

    #[test]
    fn same_seed_same_samples() {
        let (spec, data) = testing::build(Variant::M2, 5, 3);
        let a = fit(&spec, &data, &quick()).unwrap();
        let b = fit(&spec, &data, &quick()).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.summary, b.summary);
        let c = fit(&spec, &data, &FitOptions { seed: 9, ..quick() }).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn diffuse_irrelevant_coefficient_lowers_the_marginal() {
        let table = testing::table(8, 4);
        let cov = [testing::covariate("noise", 17)];
        let dens = testing::density();
        let build = |precision: f64| {
            let cfg = SpecConfig {
                coefficient_precision: precision,
                ..testing::config(Variant::M3)
            };
            ModelSpec::build(
                &cfg,
                SpecInputs {
                    domain: crate::gmrf::StudyDomain::new(testing::geometry(), 1).unwrap(),
                    density: &dens,
                    table: &table,
                    offsets: Default::default(),
                    covariates: &cov,
                },
            )
            .unwrap()
        };
        let mut last = f64::INFINITY;
        for p in [1e-1, 1e-3, 1e-5, 1e-8] {
            let (spec, data) = build(p);
            let lm = fit(&spec, &data, &quick()).unwrap().summary.log_marginal;
            assert!(lm < last, "precision {p}: {lm} vs {last}");
            last = lm;
        }
    }

    #[test]
    fn empty_data_is_rejected() {
        let (spec, _) = testing::build(Variant::M2, 3, 1);
        let empty = ModelData::empty(spec.n_latent());
        assert!(fit(&spec, &empty, &quick()).is_err());
    }

    #[test]
    fn required_convergence_reports_the_best_point() {
        let (spec, data) = testing::build(Variant::M2, 6, 5);
        let opts = FitOptions {
            max_iters: 2,
            require_convergence: true,
            ..quick()
        };
        match fit(&spec, &data, &opts) {
            Err(Error::OptimizerFailure { best_theta, best_value, .. }) => {
                assert_eq!(best_theta.len(), spec.hyper.len());
                assert!(best_value.is_finite());
            }
            other => panic!("expected optimizer failure, got {:?}", other.map(|r| r.summary)),
        }
    }
}
