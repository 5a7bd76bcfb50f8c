use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("time {t} outside schedule range [0, {max}]")]
    TimeOutOfRange { t: f64, max: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("query point outside grid support: {0}")]
    OutOfSupport(String),

    #[error("posterior is not log-concave: min curvature {min_curvature:e} at {location}")]
    NotLogConcave { min_curvature: f64, location: String },

    #[error("posterior mass {mass:e} leaks outside the grid")]
    MassLeak { mass: f64 },

    #[error("unsupported operator: {0}")]
    UnsupportedOperator(String),

    #[error("non-finite state at {stage} step {step} (gradient norm {grad_norm:e}, likelihood-gradient norm {lik_norm:e})")]
    NonFinite {
        stage: &'static str,
        step: usize,
        grad_norm: f64,
        lik_norm: f64,
    },

    #[error("sample-count cap exceeded: {count} > {cap}")]
    TooManySamples { count: usize, cap: usize },

    #[error("not enough samples: need at least {need}, got {got}")]
    TooFewSamples { need: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
