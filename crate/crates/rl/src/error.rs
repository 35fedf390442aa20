use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("shape mismatch in {what}: expected {expected}, got {found}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid configuration `{name}`: {reason}")]
    InvalidConfig { name: &'static str, reason: String },

    #[error("non-finite loss at iteration {iteration}, epoch {epoch}: policy {policy}, value {value}")]
    NonFiniteLoss {
        iteration: usize,
        epoch: usize,
        policy: f64,
        value: f64,
    },

    #[error("network produced a non-finite mean or value")]
    NonFiniteOutput,

    #[error("environment: {0}")]
    Env(#[from] doublewell_core::Error),

    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint shape table does not match: {0}")]
    CheckpointShape(String),
}

pub type Result<T, E = RlError> = std::result::Result<T, E>;

pub(crate) fn invalid_config(name: &'static str, reason: impl Into<String>) -> RlError {
    RlError::InvalidConfig {
        name,
        reason: reason.into(),
    }
}
