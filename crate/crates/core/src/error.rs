use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {field}: {detail}")]
    Format {
        path: PathBuf,
        /// First violated field of the binary or text layout ("magic", "dtype", "payload", ...).
        field: &'static str,
        detail: String,
    },

    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown sample id {0:?}")]
    UnknownSample(String),

    #[error("matrix is numerically singular (condition estimate {condition:.3e})")]
    Singular { condition: f64 },

    #[error("training failed at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },

    #[error("prediction preservation violated: max logit deviation {max_abs_logit_dev:.3e}, {argmax_mismatches} argmax mismatches")]
    Preservation {
        max_abs_logit_dev: f64,
        argmax_mismatches: usize,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, field: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            field,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Process exit code for this error class.
    ///
    /// 1 validation/contract, 2 I/O (including malformed files), 3 training failure,
    /// 4 preservation violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Contract(_) | Error::UnknownSample(_) | Error::Singular { .. } => 1,
            Error::Io { .. } | Error::Format { .. } => 2,
            Error::Training { .. } => 3,
            Error::Preservation { .. } => 4,
        }
    }
}
