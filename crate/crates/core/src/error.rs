use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("operator `{0}` must be hermitian")]
    NotHermitian(&'static str),

    #[error("state has no support in the {0} parity sector (weight {1:e})")]
    NoParitySupport(&'static str, f64),

    #[error("eigensolver did not converge")]
    EigensolverFailed,

    #[error("invalid density matrix: {0}")]
    InvalidState(String),

    #[error("integrator produced non-finite entries at substep {substep}")]
    NonFinite { substep: usize },

    #[error("positivity violated: minimum eigenvalue {min_eigenvalue:e}")]
    PositivityViolation { min_eigenvalue: f64 },

    #[error("trajectory aborted at step {step}: {source}")]
    TrajectoryAborted {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("ensemble copy {copy} aborted: {source}")]
    CopyAborted {
        copy: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("controller needs `{0}`, which this run does not expose")]
    MissingPrivilegedField(&'static str),

    #[error("episode already finished after {0} steps; call reset first")]
    EpisodeFinished(usize),

    #[error("environment must be reset before stepping")]
    NotReset,

    #[error("invalid action: {0}")]
    InvalidAction(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
