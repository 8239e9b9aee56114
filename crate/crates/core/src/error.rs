use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    /// A Schur quantity that must stay strictly positive did not.
    #[error("SPD invariant violated at column {column}: {detail}")]
    SpdViolation { column: usize, detail: String },

    /// A numerical failure while running a model on one dataset entry.
    #[error("numerical breakdown on sample {sample}{}: {source}", epoch.map(|e| format!(", epoch {e}")).unwrap_or_default())]
    Breakdown {
        sample: usize,
        epoch: Option<usize>,
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Format(err.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
