use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inputs that violate a shape or range precondition of an operation.
    #[error("input contract violated: {0}")]
    InputContract(String),

    /// An operation was invoked in a state where it is not defined
    /// (e.g. a layer without an adapter, a disabled projection adapter).
    #[error("contract violated: {0}")]
    Contract(String),

    /// Correlations and cosine similarities that are undefined for the data.
    #[error("numeric contract violated: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("failed to ingest {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("trainable-set audit failed: {0}")]
    Audit(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable, machine-readable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InputContract(_) => "input_contract",
            Error::Contract(_) => "contract",
            Error::Numeric(_) => "numeric",
            Error::Config(_) => "config",
            Error::Ingestion { .. } => "ingestion",
            Error::Checkpoint(_) => "checkpoint",
            Error::Audit(_) => "audit",
            Error::Manifest(_) => "manifest",
            Error::Io(_) => "io",
            Error::Json(_) | Error::Csv(_) => "serialization",
        }
    }

    /// Process exit code for the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Ingestion { .. } | Error::Manifest(_) => 3,
            Error::InputContract(_) | Error::Contract(_) | Error::Numeric(_) => 4,
            Error::Checkpoint(_) => 5,
            Error::Audit(_) => 6,
            Error::Io(_) | Error::Json(_) | Error::Csv(_) => 7,
        }
    }

    pub(crate) fn ingestion(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Ingestion {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
