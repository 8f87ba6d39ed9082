use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the engine.
///
/// `Contract` covers violated preconditions (dimension mismatches, empty
/// batches, out-of-range inputs). `Io` and `Schema` cover everything that
/// goes wrong while reading or writing files.
#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn schema(msg: impl Into<String>) -> Self {
        Error::Schema(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the "domain" kind (contract violations,
    /// divergence) as opposed to IO or parse failures.
    pub fn is_domain(&self) -> bool {
        matches!(self, Error::Contract(_) | Error::Diverged { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
