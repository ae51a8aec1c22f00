//! The smoothing models: latent layout, binomial likelihood, Laplace
//! approximation, empirical-Bayes fitting and prediction.

pub mod covariates;
pub mod fit;
pub mod laplace;
pub mod likelihood;
pub mod offset;
pub mod predict;
pub mod spec;

#[cfg(test)]
pub(crate) mod testing;

pub use covariates::{CovariateDesign, CovariateLayer, Standardization};
pub use fit::{fit, FitOptions, FitResult, FitSummary, GridPoint, GridSpec};
pub use laplace::{inner_gaussian_approximation, GaussianApprox, LaplaceEngine, LaplaceEval, NewtonOptions};
pub use likelihood::{log_likelihood, log_likelihood_gradient, log_posterior, log_posterior_gradient, pointwise_log_likelihood};
pub use offset::{BiasOffsetTable, BiasRow};
pub use predict::{field_odds_surface, predict_u5mr_surface, prediction_years, StratumPolicy, SurfaceSamples};
pub use spec::{
    ClusterEntry, Coef, HyperKind, LatentLayout, ModelData, ModelSpec, PrecisionTerm, RowInfo, SpecConfig,
    SpecInputs, TimeAxis, Variant,
};
