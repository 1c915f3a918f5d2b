use thiserror::Error;

/// Errors produced by the detectors, predictors and experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({what})")]
    DimensionMismatch { what: &'static str, expected: usize, actual: usize },

    #[error("observation is not informative: posterior precision {posterior} <= prior precision {prior}")]
    NonInformative { posterior: f64, prior: f64 },

    #[error("closed-form predictors require a symmetric prior variance")]
    AsymmetricPrior,

    #[error("matrix is not symmetric positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("numerical fault: {0}")]
    NumericalFault(String),

    #[error("relaxation w = {w} outside the convergence window (0, {upper})")]
    RelaxationOutOfWindow { w: f64, upper: f64 },

    #[error("power iteration did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("system is not overloaded: load factor {beta} <= 1")]
    NotOverloaded { beta: f64 },

    #[error("unknown detector `{0}`")]
    UnknownDetector(String),

    #[error("spec file: {0}")]
    Spec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
