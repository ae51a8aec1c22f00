use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
///
/// Variants are grouped by the module that raises them so the CLI can report a
/// module-qualified message.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("survey: {0}")]
    Survey(String),

    #[error("survey: variance not estimable ({0})")]
    VarianceNotEstimable(String),

    #[error("gmrf: {0}")]
    Gmrf(String),

    #[error("gmrf: matrix is not positive definite ({0})")]
    NotPositiveDefinite(String),

    #[error("model: {0}")]
    Model(String),

    #[error("model: non-finite log posterior: {0}")]
    NonFinite(String),

    #[error("model: inner Newton iteration failed to converge after {iterations} iterations (gradient norms: {trace:?})")]
    NewtonDivergence { iterations: usize, trace: Vec<f64> },

    #[error("model: hyperparameter optimizer failed ({reason}); best log posterior {best_value} at theta {best_theta:?}")]
    OptimizerFailure {
        reason: String,
        best_theta: Vec<f64>,
        best_value: f64,
    },

    #[error("model: covariate rasters have gaps at cluster locations: {0:?}")]
    RasterGaps(Vec<String>),

    #[error("simulate: {0}")]
    Simulation(String),

    #[error("aggregate: {0}")]
    Aggregate(String),

    #[error("evaluate: {0}")]
    Evaluate(String),

    #[error("config {path}:{line}: {message}")]
    Config {
        path: String,
        line: usize,
        message: String,
    },

    #[error("missing input files: {0:?}")]
    MissingInputs(Vec<PathBuf>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user-supplied configuration or missing
    /// inputs rather than a runtime failure.
    pub fn is_usage_error(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::MissingInputs(_))
    }
}
