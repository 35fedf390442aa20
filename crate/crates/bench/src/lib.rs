//! Reproducible experiments, figure data and the `doublewell` command line.
//!
//! A [`config::RunConfig`] fixes everything a run depends on. Every command
//! writes a [`manifest::RunManifest`] beside its outputs, and every dataset row
//! carries the manifest hash of the configuration that produced it.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod figures;
pub mod manifest;
pub mod runs;

pub use config::{AgentKind, RunConfig, Scale};
pub use dataset::{summarize, SummaryRow, TidyRow};
pub use error::{BenchError, Result};
pub use experiments::{run_experiment, ExperimentReport, REGISTRY};
pub use figures::{emit_figure_data, FigureKind, FigureSource, PhaseGrid};
pub use manifest::RunManifest;
