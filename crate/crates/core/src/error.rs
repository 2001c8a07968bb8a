use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Caller broke a documented precondition.
    Contract,
    /// A fit failed to converge or degenerated.
    Numerical,
    /// File system or format problem.
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("malformed NIfTI header: {0}")]
    MalformedHeader(String),
    #[error("not a 3D scalar volume: {0}")]
    NotScalar3d(String),
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),
    #[error("mask is empty or too small: {0}")]
    EmptyMask(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("zero variance: {0}")]
    ZeroVariance(String),
    #[error("no WM peak found")]
    NoPeak,
    #[error("no nonzero differences")]
    NoNonzeroDifferences,
    #[error("empty CSF intersection")]
    EmptyCsfIntersection,
    #[error("{what} did not converge after {iterations} iterations (last objective {objective})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        objective: f64,
    },
    #[error("degenerate fit: {0}")]
    Degenerate(String),
    #[error("model file error: {0}")]
    Schema(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. }
            | Error::MissingFile(_)
            | Error::MalformedHeader(_)
            | Error::Schema(_)
            | Error::Json(_) => ErrorKind::Io,
            Error::NonConvergence { .. } | Error::Degenerate(_) | Error::ZeroVariance(_) | Error::NoPeak => {
                ErrorKind::Numerical
            }
            _ => ErrorKind::Contract,
        }
    }
}
