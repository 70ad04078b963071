use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("parameter index {index} out of range for {count} parameters")]
    ParamIndex { index: usize, count: usize },

    #[error("matrix is not positive definite even with jitter {max_jitter:e} (smallest eigenvalue estimate {min_eigenvalue:e})")]
    NotPositiveDefinite {
        min_eigenvalue: f64,
        max_jitter: f64,
    },

    #[error(
        "hyperdata Gram factorization failed ({0}); add jitter or deduplicate hyperdata inputs"
    )]
    Hyperdata(Box<Error>),

    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
