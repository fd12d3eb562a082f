use thiserror::Error;

/// Errors produced by the library.
///
/// Data problems (bad input, invalid cohorts, parse failures) and numerical
/// failures (singular systems, separation, non-convergence) are kept apart so
/// callers can map them to different exit statuses.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("singular design: rank {rank} of {ncols}; aliased columns: {}", .columns.join(", "))]
    Singular {
        rank: usize,
        ncols: usize,
        columns: Vec<String>,
    },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("logistic separation detected (coefficient max norm {norm:.3e})")]
    Separation { norm: f64 },

    #[error("failed to converge after {iterations} iterations: {what}")]
    NoConvergence { what: String, iterations: usize },

    #[error("{0}")]
    Empty(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical kernel rather than of the data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular { .. }
                | Error::NotPositiveDefinite(_)
                | Error::Separation { .. }
                | Error::NoConvergence { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
