use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] doublewell_core::Error),

    #[error(transparent)]
    Rl(#[from] doublewell_rl::RlError),

    #[error(transparent)]
    Record(#[from] doublewell_core::record::RecordError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("configuration: {0}")]
    Config(String),

    #[error("unknown experiment `{name}`; available: {available}")]
    UnknownExperiment { name: String, available: String },

    #[error("missing source {0}")]
    MissingSource(PathBuf),

    #[error("{kind} cannot be drawn from {source_kind}")]
    FigureSource {
        kind: &'static str,
        source_kind: &'static str,
    },

    #[error("experiment `{name}` failed ({failures} incidents); see {marker}")]
    ExperimentFailed {
        name: String,
        failures: usize,
        marker: PathBuf,
    },
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;

pub(crate) fn io_error(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> BenchError {
    let path = path.into();
    move |source| BenchError::Io { path, source }
}

pub(crate) fn csv_error(path: impl Into<PathBuf>) -> impl FnOnce(csv::Error) -> BenchError {
    let path = path.into();
    move |source| BenchError::Csv { path, source }
}
