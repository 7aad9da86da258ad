use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A row in an input file could not be interpreted.
    #[error("{path}: {message} at line {line}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    /// Input data is well-formed but violates a dataset invariant.
    #[error("{0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Checkpoint(String),

    /// Dimensions disagree between two artifacts (checkpoint vs. dataset, etc).
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown student: {0}")]
    UnknownStudent(String),

    #[error("non-finite loss: {0}")]
    NonFinite(String),

    /// Analytic and numeric gradients disagree.
    #[error("{0}")]
    GradientMismatch(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the failure was caused by user input rather than a defect.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::NonFinite(_) | Error::GradientMismatch(_))
    }
}
