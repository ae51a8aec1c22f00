//! Binomial log-likelihood of person-month cells and the joint log posterior.

use super::spec::{ModelData, ModelSpec};
use crate::error::{Error, Result};
use crate::gmrf::CholeskyFactor;
use crate::hazard::{expit, softplus};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `d eta - n log(1 + e^eta)` for each cell: the sum of the Bernoulli
/// log-likelihoods of its person-months.
pub fn pointwise_log_likelihood(data: &ModelData, eta: &[f64]) -> Vec<f64> {
    eta.iter()
        .zip(data.deaths.iter().zip(&data.exposure))
        .map(|(&e, (&d, &n))| d * e - n * softplus(e))
        .collect()
}

pub fn log_likelihood(data: &ModelData, x: &[f64]) -> f64 {
    pointwise_log_likelihood(data, &data.predictor(x)).iter().sum()
}

/// `A' (d - n p)`, the gradient of the log-likelihood in `x`.
pub fn log_likelihood_gradient(data: &ModelData, x: &[f64]) -> Vec<f64> {
    let eta = data.predictor(x);
    let resid: Vec<f64> = eta
        .iter()
        .zip(data.deaths.iter().zip(&data.exposure))
        .map(|(&e, (&d, &n))| d - n * expit(e))
        .collect();
    data.tr_mul(&resid)
}

/// Log-likelihood plus the (unconstrained, proper) Gaussian latent density
/// `N(0, Q(theta)^{-1})` plus the hyperparameter prior.
///
/// The Gaussian term carries its full normalizing constant; the density of
/// the constrained latent field differs from it by a term that depends on
/// `theta` only through `log |A Q^{-1} A'|`, which the Laplace marginal adds
/// separately.
pub fn log_posterior(spec: &ModelSpec, data: &ModelData, x: &[f64], theta: &[f64]) -> Result<f64> {
    check_len(spec, x)?;
    let h = spec.hyperparameters(theta)?;
    let q = spec.precision(&h)?;
    let factor = CholeskyFactor::new(&q)?;
    let n = x.len() as f64;
    let lp = log_likelihood(data, x) - 0.5 * q.quad_form(x) + 0.5 * factor.log_det() - 0.5 * n * LN_2PI
        + spec.log_prior_theta(theta);
    if !lp.is_finite() {
        return Err(Error::NonFinite(format!(
            "log posterior is {lp} (log-likelihood {}, theta {theta:?})",
            log_likelihood(data, x)
        )));
    }
    Ok(lp)
}

/// Gradient of [`log_posterior`] in the latent vector.
pub fn log_posterior_gradient(spec: &ModelSpec, data: &ModelData, x: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
    check_len(spec, x)?;
    let q = spec.precision(&spec.hyperparameters(theta)?)?;
    let qx = q.mul_vec(x);
    let mut g = log_likelihood_gradient(data, x);
    for (gi, qi) in g.iter_mut().zip(qx) {
        *gi -= qi;
    }
    Ok(g)
}

fn check_len(spec: &ModelSpec, x: &[f64]) -> Result<()> {
    if x.len() != spec.n_latent() {
        return Err(Error::Model(format!(
            "latent vector has length {} but the model has {}",
            x.len(),
            spec.n_latent()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmrf::testing::dense_log_det;
    use crate::hazard::{AgeBand, PersonMonth};
    use crate::model::spec::Variant;
    use crate::model::testing;

    fn theta(spec: &ModelSpec) -> Vec<f64> {
        spec.default_theta()
    }

    #[test]
    fn empty_data_gives_the_prior_density() {
        let (spec, _) = testing::build(Variant::SpaceTime, 4, 1);
        let empty = ModelData::empty(spec.n_latent());
        let x = testing::random_latent(spec.n_latent(), 0.3, 2);
        let t = theta(&spec);
        let q = spec.precision(&spec.hyperparameters(&t).unwrap()).unwrap();
        let n = x.len() as f64;
        let expect = -0.5 * q.quad_form(&x) + 0.5 * dense_log_det(&q) - 0.5 * n * LN_2PI + spec.log_prior_theta(&t);
        let got = log_posterior(&spec, &empty, &x, &t).unwrap();
        assert!((got - expect).abs() < 1e-8 * expect.abs().max(1.0), "{got} vs {expect}");
    }

    #[test]
    fn one_survivor_at_zero_predictor() {
        let mut d = ModelData::empty(1);
        d.deaths.push(0.0);
        d.exposure.push(1.0);
        d.offset.push(0.0);
        d.col_idx.push(0);
        d.values.push(1.0);
        d.row_ptr.push(1);
        assert!((log_likelihood(&d, &[0.0]) - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn matches_naive_per_record_sum() {
        // About 100 person-months, each scored on its own.
        let mut table = testing::table(3, 11);
        table.cells.truncate(12);
        for c in &mut table.cells {
            c.exposure = c.exposure.min(9);
            c.deaths = c.deaths.min(c.exposure).max(u32::from(c.band == 0));
        }
        let (spec, data) = testing::build_with(Variant::SpaceTime, &table, Default::default(), &[]);
        let n_pm: u32 = table.cells.iter().map(|c| c.exposure).sum();
        assert!((50..=150).contains(&n_pm), "{n_pm}");
        let x = testing::random_latent(spec.n_latent(), 0.8, 3);
        let t = theta(&spec);
        let mut ll = 0.0;
        for cell in &table.cells {
            let c = &table.clusters[cell.cluster];
            for i in 0..cell.exposure {
                let pm = PersonMonth {
                    child_id: i as u64,
                    month: 0,
                    band: AgeBand::new(cell.band as u8 + 1).unwrap(),
                    year: cell.year,
                    cluster_id: c.cluster_id,
                    survey_id: c.survey_id,
                    stratum_id: c.stratum_id,
                    died: i < cell.deaths,
                };
                let eta = spec.assemble_linear_predictor(&pm, &x).unwrap();
                let p = 1.0 / (1.0 + (-eta).exp());
                ll += if pm.died { p.ln() } else { (1.0 - p).ln() };
            }
        }
        assert!((ll - log_likelihood(&data, &x)).abs() < 1e-10);
        let q = spec.precision(&spec.hyperparameters(&t).unwrap()).unwrap();
        let lp = ll - 0.5 * q.quad_form(&x) + 0.5 * dense_log_det(&q) - 0.5 * x.len() as f64 * LN_2PI
            + spec.log_prior_theta(&t);
        let got = log_posterior(&spec, &data, &x, &t).unwrap();
        assert!((got - lp).abs() < 1e-8 * lp.abs().max(1.0), "{got} vs {lp}");
    }

    #[test]
    fn gradient_matches_central_differences() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        for v in [Variant::SpaceTime, Variant::M4] {
            let (spec, data) = testing::build(v, 6, 5);
            let t = theta(&spec);
            let x = testing::random_latent(spec.n_latent(), 0.5, 6);
            let g = log_posterior_gradient(&spec, &data, &x, &t).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
            let h = 1e-5;
            for _ in 0..50 {
                let d: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
                let at = |s: f64| {
                    let y: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + s * b).collect();
                    log_posterior(&spec, &data, &y, &t).unwrap()
                };
                let fd = (at(h) - at(-h)) / (2.0 * h);
                let an: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
                let rel = (fd - an).abs() / an.abs().max(1e-3);
                assert!(rel < 1e-5, "{v}: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn non_finite_posterior_is_reported() {
        let (spec, data) = testing::build(Variant::M2, 3, 1);
        let mut x = vec![0.0; spec.n_latent()];
        x[0] = f64::NAN;
        assert!(matches!(log_posterior(&spec, &data, &x, &theta(&spec)), Err(Error::NonFinite(_))));
    }
}
