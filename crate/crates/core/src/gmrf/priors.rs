//! Hyperparameter priors: Gamma priors on precisions and penalized-complexity
//! (PC) priors on the spatial range, spatial standard deviation and the AR(1)
//! correlation.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// `Gamma(shape, rate)` prior on a precision `tau = sigma^{-2}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrecisionPrior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPrecisionPrior {
    pub const IID_DEFAULT: Self = Self { shape: 0.5, rate: 0.0005 };
    pub const RW_DEFAULT: Self = Self { shape: 1.0, rate: 5e-5 };

    pub fn log_density(&self, tau: f64) -> f64 {
        if !(tau > 0.0) {
            return f64::NEG_INFINITY;
        }
        self.shape * self.rate.ln() - ln_gamma(self.shape) + (self.shape - 1.0) * tau.ln()
            - self.rate * tau
    }

    /// Density of `log tau`.
    pub fn log_density_log_precision(&self, log_tau: f64) -> f64 {
        self.log_density(log_tau.exp()) + log_tau
    }

    /// Quantile of the implied standard deviation `sigma = tau^{-1/2}`.
    pub fn sigma_quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("quantile level {p} outside (0, 1)")));
        }
        let g = Gamma::new(self.shape, self.rate).map_err(|e| Error::Domain(e.to_string()))?;
        // sigma below q  <=>  tau above q^{-2}
        Ok(g.inverse_cdf(1.0 - p).powf(-0.5))
    }
}

/// PC prior on a range with `P(range < r0) = alpha`:
/// `pi(r) = lambda r^{-2} exp(-lambda / r)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcRangePrior {
    pub lambda: f64,
}

impl PcRangePrior {
    pub fn from_tail(r0: f64, alpha: f64) -> Result<Self> {
        check_tail(r0, alpha)?;
        Ok(Self { lambda: -alpha.ln() * r0 })
    }

    pub fn log_density(&self, r: f64) -> f64 {
        if !(r > 0.0) {
            return f64::NEG_INFINITY;
        }
        self.lambda.ln() - 2.0 * r.ln() - self.lambda / r
    }

    pub fn cdf(&self, r: f64) -> f64 {
        if r <= 0.0 {
            0.0
        } else {
            (-self.lambda / r).exp()
        }
    }
}

/// PC prior on a standard deviation with `P(sigma > s0) = alpha`:
/// exponential with rate `lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcSigmaPrior {
    pub lambda: f64,
}

impl PcSigmaPrior {
    pub fn from_tail(s0: f64, alpha: f64) -> Result<Self> {
        check_tail(s0, alpha)?;
        Ok(Self { lambda: -alpha.ln() / s0 })
    }

    pub fn log_density(&self, sigma: f64) -> f64 {
        if !(sigma > 0.0) {
            return f64::NEG_INFINITY;
        }
        self.lambda.ln() - self.lambda * sigma
    }
}

/// PC prior on a correlation with base model `rho = 1`, distance
/// `d(rho) = sqrt(1 - rho)` and an exponential on `d` truncated to
/// `[0, sqrt 2]`, calibrated by `P(rho > u) = alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcCorrelationPrior {
    pub lambda: f64,
}

impl PcCorrelationPrior {
    pub fn from_tail(u: f64, alpha: f64) -> Result<Self> {
        if !(u > -1.0 && u < 1.0) {
            return Err(Error::Domain(format!("correlation threshold {u} outside (-1, 1)")));
        }
        let du = (1.0 - u).sqrt();
        // Under a uniform-in-distance limit P(rho > u) = du / sqrt 2; the PC
        // tail condition needs alpha above that to have a positive rate.
        let floor = du / 2f64.sqrt();
        if !(alpha > floor && alpha < 1.0) {
            return Err(Error::Domain(format!(
                "P(rho > {u}) = {alpha} must lie in ({floor:.4}, 1)"
            )));
        }
        let tail = |lambda: f64| (-(-lambda * du).exp_m1()) / (-(-lambda * 2f64.sqrt()).exp_m1()) - alpha;
        let (mut lo, mut hi) = (1e-10, 1.0);
        while tail(hi) < 0.0 {
            hi *= 2.0;
            if hi > 1e8 {
                return Err(Error::Domain("cannot calibrate correlation prior".into()));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if tail(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(Self { lambda: 0.5 * (lo + hi) })
    }

    pub fn log_density(&self, rho: f64) -> f64 {
        if !(rho > -1.0 && rho < 1.0) {
            return f64::NEG_INFINITY;
        }
        let d = (1.0 - rho).sqrt();
        self.lambda.ln() - self.lambda * d - (-(-self.lambda * 2f64.sqrt()).exp_m1()).ln()
            - (2.0 * d).ln()
    }

    pub fn prob_above(&self, u: f64) -> f64 {
        let du = (1.0 - u).sqrt();
        (-(-self.lambda * du).exp_m1()) / (-(-self.lambda * 2f64.sqrt()).exp_m1())
    }
}

fn check_tail(x0: f64, alpha: f64) -> Result<()> {
    if !(x0 > 0.0) || !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("invalid tail condition ({x0}, {alpha})")));
    }
    Ok(())
}

/// All prior settings used by the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSettings {
    pub iid: GammaPrecisionPrior,
    pub rw: GammaPrecisionPrior,
    pub range: PcRangePrior,
    pub sigma: PcSigmaPrior,
    pub rho: PcCorrelationPrior,
}

impl PriorSettings {
    pub fn new(
        range_tail: (f64, f64),
        sigma_tail: (f64, f64),
        rho_tail: (f64, f64),
    ) -> Result<Self> {
        Ok(Self {
            iid: GammaPrecisionPrior::IID_DEFAULT,
            rw: GammaPrecisionPrior::RW_DEFAULT,
            range: PcRangePrior::from_tail(range_tail.0, range_tail.1)?,
            sigma: PcSigmaPrior::from_tail(sigma_tail.0, sigma_tail.1)?,
            rho: PcCorrelationPrior::from_tail(rho_tail.0, rho_tail.1)?,
        })
    }
}

impl Default for PriorSettings {
    fn default() -> Self {
        Self::new((0.5, 0.05), (3.0, 0.05), (0.9, 0.7)).expect("default priors are valid")
    }
}

/// Parameters of the separable space-time field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeParams {
    pub range: f64,
    pub sigma: f64,
    pub rho: f64,
}

/// Hyperparameters of the smoothing model. Components absent from a given
/// model are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub sigma_cluster: Option<f64>,
    pub sigma_survey: Option<f64>,
    pub sigma_year: Option<f64>,
    pub sigma_rw2: Option<f64>,
    pub space_time: Option<SpaceTimeParams>,
    pub sigma_period: Option<f64>,
    /// Time-invariant spatial field `(range, sigma)`.
    pub spatial: Option<(f64, f64)>,
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            ("sigma_cluster", self.sigma_cluster),
            ("sigma_survey", self.sigma_survey),
            ("sigma_year", self.sigma_year),
            ("sigma_rw2", self.sigma_rw2),
            ("sigma_period", self.sigma_period),
        ];
        for (name, value) in sigmas {
            if let Some(s) = value {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::Domain(format!("{name} must be positive, got {s}")));
                }
            }
        }
        if let Some(st) = self.space_time {
            if !(st.range > 0.0 && st.sigma > 0.0 && st.range.is_finite() && st.sigma.is_finite()) {
                return Err(Error::Domain(format!("invalid space-time parameters {st:?}")));
            }
            if !(st.rho.abs() < 1.0) {
                return Err(Error::Domain(format!("AR(1) rho must satisfy |rho| < 1, got {}", st.rho)));
            }
        }
        if let Some((r, s)) = self.spatial {
            if !(r > 0.0 && s > 0.0 && r.is_finite() && s.is_finite()) {
                return Err(Error::Domain(format!("invalid spatial parameters ({r}, {s})")));
            }
        }
        Ok(())
    }
}

/// Joint log prior density of `theta` in its natural parameterization
/// (precisions for IID and random-walk blocks, range and sigma for fields).
pub fn prior_log_densities(theta: &Hyperparameters, priors: &PriorSettings) -> Result<f64> {
    theta.validate()?;
    let mut lp = 0.0;
    for s in [theta.sigma_cluster, theta.sigma_survey, theta.sigma_year].into_iter().flatten() {
        lp += priors.iid.log_density(s.powi(-2));
    }
    for s in [theta.sigma_rw2, theta.sigma_period].into_iter().flatten() {
        lp += priors.rw.log_density(s.powi(-2));
    }
    if let Some(st) = theta.space_time {
        lp += priors.range.log_density(st.range) + priors.sigma.log_density(st.sigma);
        lp += priors.rho.log_density(st.rho);
    }
    if let Some((r, s)) = theta.spatial {
        lp += priors.range.log_density(r) + priors.sigma.log_density(s);
    }
    Ok(lp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }

    #[test]
    fn gamma_prior_sigma_quantiles() {
        let p = GammaPrecisionPrior::IID_DEFAULT;
        let expected = [(0.05, 0.016), (0.5, 0.047), (0.95, 0.52)];
        for (level, q) in expected {
            let got = p.sigma_quantile(level).unwrap();
            assert!((got / q - 1.0).abs() < 0.05, "level {level}: {got}");
        }
    }

    #[test]
    fn pc_range_tail_by_quadrature() {
        let p = PcRangePrior::from_tail(0.5, 0.05).unwrap();
        let mass = simpson(|r| if r == 0.0 { 0.0 } else { p.log_density(r).exp() }, 0.0, 0.5, 20_000);
        assert!((mass - 0.05).abs() < 1e-3);
        assert!((p.cdf(0.5) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn pc_sigma_tail_by_quadrature() {
        let p = PcSigmaPrior::from_tail(3.0, 0.05).unwrap();
        let below = simpson(|s| p.log_density(s).exp(), 1e-12, 3.0, 20_000);
        assert!((1.0 - below - 0.05).abs() < 1e-3);
    }

    #[test]
    fn pc_correlation_is_calibrated_and_normalized() {
        let p = PcCorrelationPrior::from_tail(0.9, 0.7).unwrap();
        assert!((p.prob_above(0.9) - 0.7).abs() < 1e-10);
        // substitute rho = 1 - d^2 to remove the endpoint singularity
        let dens = |d: f64| p.log_density(1.0 - d * d).exp() * 2.0 * d;
        let total = simpson(dens, 1e-7, 2f64.sqrt() - 1e-9, 20_000);
        assert!((total - 1.0).abs() < 1e-5, "total {total}");
        let upper = simpson(dens, 1e-7, 0.1f64.sqrt(), 20_000);
        assert!((upper - 0.7).abs() < 1e-5, "upper {upper}");
        assert!(PcCorrelationPrior::from_tail(0.9, 0.1).is_err());
    }

    #[test]
    fn invalid_hyperparameters_error() {
        let mut theta = Hyperparameters {
            sigma_cluster: Some(0.2),
            ..Default::default()
        };
        let priors = PriorSettings::default();
        assert!(prior_log_densities(&theta, &priors).unwrap().is_finite());
        theta.sigma_cluster = Some(-1.0);
        assert!(prior_log_densities(&theta, &priors).is_err());
        theta.sigma_cluster = None;
        theta.space_time = Some(SpaceTimeParams { range: 1.0, sigma: 1.0, rho: 1.0 });
        assert!(prior_log_densities(&theta, &priors).is_err());
    }
}
