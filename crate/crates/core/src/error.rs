use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error in {path}: field `{field}`: {msg}")]
    Schema {
        path: PathBuf,
        field: String,
        msg: String,
    },

    #[error("invalid value for `{field}`: {msg}")]
    Invalid { field: &'static str, msg: String },

    #[error("projection did not converge after {iterations} sweeps (worst violation {worst_violation:.3e})")]
    ProjectionNotConverged {
        iterations: usize,
        worst_violation: f64,
    },

    #[error("non-finite iterate at iteration {iter}: {what}")]
    NonFinite { iter: usize, what: &'static str },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            context,
            expected,
            got,
        });
    }
    Ok(())
}
