//! Plain CSV data behind the figures. Headers:
//!
//! | kind             | columns                                            |
//! |------------------|----------------------------------------------------|
//! | `wigner`         | `x,p,W`                                            |
//! | `fidelity-trace` | `step,t,fidelity`                                  |
//! | `current-trace`  | `t,I,expect_x2`                                    |
//! | `streamlines`    | `x,p,vx,vp,energy`                                 |
//! | `training-curve` | `iteration,steps,mean_reward,mean_fidelity,reward_ma20` |
//!
//! `energy` is the classical double-well energy `p²/2 + V(x)`, whose level
//! sets are the equipotentials the flow is drawn over.

use std::path::{Path, PathBuf};

use doublewell_core::hilbert::{linspace, phase_flow, wigner};
use doublewell_core::record::TrajectoryLog;
use doublewell_core::{DensityMatrix, DoubleWellParams, FeedbackKind};
use serde::Deserialize;

use crate::error::{csv_error, io_error, BenchError, Result};

/// Window of the training-curve moving average.
pub const MOVING_AVERAGE: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum FigureKind {
    Wigner,
    FidelityTrace,
    CurrentTrace,
    Streamlines,
    TrainingCurve,
}

impl FigureKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Wigner => "wigner",
            Self::FidelityTrace => "fidelity-trace",
            Self::CurrentTrace => "current-trace",
            Self::Streamlines => "streamlines",
            Self::TrainingCurve => "training-curve",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseGrid {
    pub x: Vec<f64>,
    pub p: Vec<f64>,
}

impl PhaseGrid {
    pub fn new(x_extent: f64, p_extent: f64, nx: usize, np: usize) -> Self {
        Self {
            x: linspace(-x_extent, x_extent, nx),
            p: linspace(-p_extent, p_extent, np),
        }
    }
}

#[derive(Debug, Clone)]
pub enum FigureSource {
    State {
        rho: DensityMatrix,
        kbar: f64,
        grid: PhaseGrid,
    },
    Trajectory(TrajectoryLog),
    /// CSV trajectory log on disk.
    TrajectoryFile(PathBuf),
    Flow {
        kind: FeedbackKind,
        well: DoubleWellParams,
        grid: PhaseGrid,
    },
    /// Metrics CSV written during training.
    MetricsFile(PathBuf),
}

impl FigureSource {
    fn name(&self) -> &'static str {
        match self {
            Self::State { .. } => "a state",
            Self::Trajectory(_) | Self::TrajectoryFile(_) => "a trajectory",
            Self::Flow { .. } => "a feedback flow",
            Self::MetricsFile(_) => "a metrics file",
        }
    }
}

#[derive(Debug, Deserialize)]
struct MetricsRow {
    iteration: usize,
    steps: u64,
    mean_reward: f64,
    mean_fidelity: Option<f64>,
}

pub fn emit_figure_data(kind: FigureKind, source: &FigureSource, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mismatch = || BenchError::FigureSource {
        kind: kind.name(),
        source_kind: source.name(),
    };
    let rows: Vec<Vec<String>> = match (kind, source) {
        (FigureKind::Wigner, FigureSource::State { rho, kbar, grid }) => {
            let field = wigner(rho, *kbar, &grid.x, &grid.p)?;
            let mut rows = vec![cols(["x", "p", "W"])];
            for (i, x) in field.x.iter().enumerate() {
                for (j, p) in field.p.iter().enumerate() {
                    rows.push(nums([*x, *p, field.values[(i, j)]]));
                }
            }
            rows
        }
        (FigureKind::FidelityTrace | FigureKind::CurrentTrace, FigureSource::TrajectoryFile(file)) => {
            let log = read_log(file)?;
            return emit_figure_data(kind, &FigureSource::Trajectory(log), path);
        }
        (FigureKind::FidelityTrace, FigureSource::Trajectory(log)) => {
            let mut rows = vec![cols(["step", "t", "fidelity"])];
            for (k, f) in log.fidelities.iter().enumerate() {
                rows.push(vec![k.to_string(), time(k, log.dt), f.to_string()]);
            }
            rows
        }
        (FigureKind::CurrentTrace, FigureSource::Trajectory(log)) => {
            let mut rows = vec![cols(["t", "I", "expect_x2"])];
            for k in 0..log.len() {
                rows.push(vec![time(k, log.dt), log.currents[k].to_string(), log.expect_x2[k].to_string()]);
            }
            rows
        }
        (FigureKind::Streamlines, FigureSource::Flow { kind: fb, well, grid }) => {
            let flow = phase_flow(*fb, &grid.x, &grid.p);
            let mut rows = vec![cols(["x", "p", "vx", "vp", "energy"])];
            for (i, x) in flow.x.iter().enumerate() {
                for (j, p) in flow.p.iter().enumerate() {
                    let energy = 0.5 * p * p + well.potential(*x);
                    rows.push(nums([*x, *p, flow.vx[(i, j)], flow.vp[(i, j)], energy]));
                }
            }
            rows
        }
        (FigureKind::TrainingCurve, FigureSource::MetricsFile(file)) => {
            if !file.exists() {
                return Err(BenchError::MissingSource(file.clone()));
            }
            let metrics: Vec<MetricsRow> = crate::dataset::read_csv(file)?;
            let mut rows = vec![cols(["iteration", "steps", "mean_reward", "mean_fidelity", "reward_ma20"])];
            for (k, m) in metrics.iter().enumerate() {
                let window = &metrics[(k + 1).saturating_sub(MOVING_AVERAGE)..=k];
                let ma = window.iter().map(|r| r.mean_reward).sum::<f64>() / window.len() as f64;
                rows.push(vec![
                    m.iteration.to_string(),
                    m.steps.to_string(),
                    m.mean_reward.to_string(),
                    m.mean_fidelity.map(|f| f.to_string()).unwrap_or_default(),
                    ma.to_string(),
                ]);
            }
            rows
        }
        _ => return Err(mismatch()),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_error(path))?;
    for row in rows {
        w.write_record(&row).map_err(csv_error(path))?;
    }
    w.flush().map_err(io_error(path))
}

fn read_log(file: &Path) -> Result<TrajectoryLog> {
    if !file.exists() {
        return Err(BenchError::MissingSource(file.to_path_buf()));
    }
    let f = std::fs::File::open(file).map_err(io_error(file))?;
    Ok(TrajectoryLog::read_csv(f)?)
}

/// End of control interval `k`, matching the trajectory log.
fn time(k: usize, dt: f64) -> String {
    ((k + 1) as f64 * dt).to_string()
}

fn cols<const N: usize>(names: [&str; N]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn nums<const N: usize>(values: [f64; N]) -> Vec<String> {
    values.iter().map(|v| v.to_string()).collect()
}
