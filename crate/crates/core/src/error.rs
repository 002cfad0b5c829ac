//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value. `field` names the offending key so CLI
    /// errors can point at it.
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    /// Array dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// The class-representation bank has no row yet for some class of the
    /// requested domain. Callers fall back to naive scoring.
    #[error("class representation bank not ready for domain {domain}")]
    BankNotReady { domain: usize },

    /// Cosine similarity against a zero-norm vector is undefined.
    #[error("degenerate (zero-norm) vector in similarity computation")]
    DegenerateVector,

    /// A sample was claimed to live in a set it is not a member of.
    #[error("sample identity violation: {0}")]
    Identity(String),

    /// Dataset layout does not satisfy the expected schema.
    #[error("dataset schema error: {0}")]
    Schema(String),

    /// A loss became NaN or infinite; the report snapshot travels with the
    /// error so the caller can dump diagnostic state.
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFinite {
        epoch: usize,
        step: usize,
        report: Box<crate::losses::LossReport>,
    },

    /// Checkpoint was produced under a different configuration.
    #[error("config hash mismatch: checkpoint has {found}, current config is {expected}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("empty domain: {0}")]
    EmptyDomain(String),

    #[error("incompatible metrics logs: {0}")]
    IncompatibleLogs(String),

    #[error("checkpoint load error: {0}")]
    CheckpointLoad(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: &str, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }

    pub fn shape(message: impl Into<String>) -> Self {
        Error::Shape(message.into())
    }
}
