use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("unsupported dimensionality: dim[0] = {0}, only 3D volumes are supported")]
    UnsupportedDimensionality(i16),

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid transform: {0}")]
    InvalidTransform(String),

    #[error("numerical failure at level {level}, iteration {iteration}: {detail}")]
    NumericalFailure {
        level: usize,
        iteration: usize,
        detail: String,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("atlas {index}: {source}")]
    Atlas {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Strips [`Error::Atlas`] wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Atlas { source, .. } => source.root(),
            other => other,
        }
    }
}
