//! Gaussian Markov random field machinery: sparse precisions, factorization,
//! constraints, sampling and hyperparameter priors.

pub mod cholesky;
pub mod constraints;
pub mod dense;
pub mod knots;
pub mod mesh;
pub mod precision;
pub mod priors;
pub mod raster;
pub mod sampler;
pub mod sparse;

#[cfg(test)]
pub(crate) mod testing;

pub use cholesky::{CholeskyFactor, SymbolicFactor};
pub use constraints::{population_constraints, ConstraintSet};
pub use knots::{knot_interpolation_matrix, KnotSchedule};
pub use mesh::{spde_matern_precision, MaternParams, SpatialMesh, SpdeComponents};
pub use precision::{
    ar1_precision, iid_precision, random_walk_structure, rw1_precision, rw2_precision,
    separable_st_precision, SparsePrecisionBlock,
};
pub use priors::{
    prior_log_densities, GammaPrecisionPrior, Hyperparameters, PcCorrelationPrior, PcRangePrior,
    PcSigmaPrior, PriorSettings, SpaceTimeParams,
};
pub use raster::{AsciiGrid, GridGeometry, StudyDomain};
pub use sampler::{sample_constrained, sample_with_factor, KrigingCorrection};
pub use sparse::CscMatrix;
