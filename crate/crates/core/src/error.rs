use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("invalid reference measure: {0}")]
    InvalidReference(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unsupported dimension {0} (only d = 2 can be exported)")]
    UnsupportedDimension(usize),

    /// An iterate left the finite reals.
    #[error("non-finite iterate at iteration {iter}")]
    NonFinite { iter: usize },

    #[error("no convergence after {iters} iterations (last marginal violation {violation:e})")]
    NotConverged { iters: usize, violation: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Validation failures are caller mistakes; everything else is numerical or I/O.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidMeasure(_)
                | Error::InvalidReference(_)
                | Error::DimensionMismatch { .. }
                | Error::ShapeMismatch(_)
                | Error::InvalidConfig(_)
                | Error::UnsupportedDimension(_)
                | Error::Json { .. }
        )
    }
}
