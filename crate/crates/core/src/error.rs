use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A shape, parameter set or argument violates one of its invariants.
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    /// No configuration satisfies the requested constraints.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// The least-squares design cannot identify the requested exponents.
    #[error("power-law fit not identifiable: {0}")]
    Identifiability(String),

    /// Training or a gradient check produced a non-finite or out-of-tolerance value.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("fixture {path}: {reason}")]
    Fixture { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
