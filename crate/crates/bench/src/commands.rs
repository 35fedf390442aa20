//! One function per CLI subcommand. Each writes its CSV outputs and a
//! `<command>.manifest.toml` into the output directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use doublewell_core::control::{ensemble_bayesian_run, EstimateSource};
use doublewell_core::hilbert::{parity_operator, spectrum, Eigenpair};
use doublewell_core::record::TrajectoryLog;
use doublewell_core::sme::{markovian_steady_state, MarkovianSteadyState, TrajectoryRecord};
use doublewell_core::{ControllerSpec, FeedbackKind};
use doublewell_rl::{Checkpoint, MetricsWriter, Trainer};
use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset::write_csv;
use crate::error::{io_error, Result};
use crate::experiments::{run_experiment, ExperimentReport, MARKOVIAN_GAMMA_GRID};
use crate::figures::{emit_figure_data, FigureKind, FigureSource, PhaseGrid};
use crate::manifest::RunManifest;
use crate::runs::{controller_episodes, eval_seeds, initial_network, make_envs, policy_episodes, EpisodeRow};

/// Phase-space window for Wigner fields.
pub const WIGNER_X_EXTENT: f64 = 7.0;
pub const WIGNER_P_EXTENT: f64 = 5.0;

fn prepare(out: &Path, command: &str, cfg: &RunConfig) -> Result<String> {
    std::fs::create_dir_all(out).map_err(io_error(out))?;
    let manifest = RunManifest::new(command, cfg);
    manifest.write(out.join(format!("{command}.manifest.toml")))?;
    Ok(manifest.hash())
}

#[derive(Debug, Serialize)]
struct LevelRow {
    level: usize,
    energy: f64,
    parity: &'static str,
}

/// Lowest `levels` eigenpairs to `spectrum.csv`.
pub fn ground_state(cfg: &RunConfig, out: &Path, levels: usize) -> Result<Vec<Eigenpair>> {
    prepare(out, "ground-state", cfg)?;
    let system = cfg.build_system()?;
    let pairs = spectrum(&system.hamiltonian, levels)?;
    let rows: Vec<LevelRow> = pairs
        .iter()
        .enumerate()
        .map(|(level, e)| LevelRow {
            level,
            energy: e.energy,
            parity: e.parity.map_or("mixed", |p| p.label()),
        })
        .collect();
    write_csv(out.join("spectrum.csv"), &rows)?;
    Ok(pairs)
}

/// `<P>` of the ground state, which is `+1` for the even cat.
pub fn ground_parity(cfg: &RunConfig) -> Result<f64> {
    let system = cfg.build_system()?;
    let parity = parity_operator(&system.space);
    Ok(system.ground.expectation(&parity)?.re)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum StateChoice {
    Ground,
    /// The configured episode start.
    Initial,
}

/// Wigner field of the ground or initial state to `wigner.csv`; returns the
/// grid integral.
pub fn wigner_field(cfg: &RunConfig, out: &Path, state: StateChoice, points: usize) -> Result<f64> {
    prepare(out, "wigner", cfg)?;
    let system = cfg.build_system()?;
    let rho = match state {
        StateChoice::Ground => system.ground.to_density(),
        StateChoice::Initial => cfg.episode.initial_state.build(&system)?,
    };
    let grid = PhaseGrid::new(WIGNER_X_EXTENT, WIGNER_P_EXTENT, points, points);
    let field = doublewell_core::hilbert::wigner(&rho, cfg.system.kbar, &grid.x, &grid.p)?;
    let source = FigureSource::State {
        rho,
        kbar: cfg.system.kbar,
        grid,
    };
    emit_figure_data(FigureKind::Wigner, &source, out.join("wigner.csv"))?;
    Ok(field.integral())
}

/// Classical flow of every feedback generator to `streamlines_<kind>.csv`.
pub fn streamlines(cfg: &RunConfig, out: &Path, points: usize) -> Result<Vec<PathBuf>> {
    prepare(out, "streamlines", cfg)?;
    FeedbackKind::ALL
        .into_iter()
        .map(|kind| {
            let path = out.join(format!("streamlines_{}.csv", kind.name()));
            let source = FigureSource::Flow {
                kind,
                well: cfg.system.well,
                grid: PhaseGrid::new(WIGNER_X_EXTENT, WIGNER_P_EXTENT, points, points),
            };
            emit_figure_data(FigureKind::Streamlines, &source, &path)?;
            Ok(path)
        })
        .collect()
}

fn write_traces(record: &TrajectoryRecord, dt: f64, out: &Path, stem: &str) -> Result<()> {
    let log = TrajectoryLog::from_record(record, dt);
    let csv_path = out.join(format!("{stem}.csv"));
    log.write_csv(std::fs::File::create(&csv_path).map_err(io_error(&csv_path))?)?;
    let bin_path = out.join(format!("{stem}.bin"));
    log.write_binary(std::fs::File::create(&bin_path).map_err(io_error(&bin_path))?)?;
    let source = FigureSource::Trajectory(log);
    emit_figure_data(FigureKind::FidelityTrace, &source, out.join("fidelity_trace.csv"))?;
    emit_figure_data(FigureKind::CurrentTrace, &source, out.join("current_trace.csv"))
}

/// One closed-loop trajectory under the configured controller.
pub fn evolve(cfg: &RunConfig, out: &Path) -> Result<TrajectoryRecord> {
    prepare(out, "evolve", cfg)?;
    let system = cfg.build_system()?;
    let seeds = eval_seeds(cfg.seed, 1);
    let record = controller_episodes(cfg, &system, &seeds)?.remove(0);
    write_traces(&record, cfg.sme.dt_control, out, "trajectory")?;
    Ok(record)
}

fn episode_table(records: &[TrajectoryRecord], seeds: &[u64], hash: &str) -> Vec<EpisodeRow> {
    records
        .iter()
        .zip(seeds)
        .enumerate()
        .map(|(e, (r, &s))| EpisodeRow::from_record(e, s, r, hash))
        .collect()
}

/// `evaluation.episodes` Bayesian episodes to `bayesian.csv`.
pub fn bayesian(cfg: &RunConfig, out: &Path, source: Option<EstimateSource>) -> Result<Vec<EpisodeRow>> {
    let mut cfg = cfg.clone();
    if let Some(source) = source {
        cfg.controller = ControllerSpec::Bayesian { source };
    }
    let hash = prepare(out, "bayesian", &cfg)?;
    let system = cfg.build_system()?;
    let seeds = eval_seeds(cfg.seed, cfg.evaluation.episodes);
    let records = controller_episodes(&cfg, &system, &seeds)?;
    let rows = episode_table(&records, &seeds, &hash);
    write_csv(out.join("bayesian.csv"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Serialize)]
struct EnsembleRow {
    step: usize,
    t: f64,
    mean_fidelity: f64,
    amplitude: f64,
}

/// One lockstep ensemble to `ensemble.csv`; returns the episode-mean fidelity.
pub fn ensemble(cfg: &RunConfig, out: &Path) -> Result<f64> {
    prepare(out, "ensemble", cfg)?;
    let system = cfg.build_system()?;
    let sme = cfg.sme_for(&system);
    let rho0 = cfg.episode.initial_state.build(&system)?;
    let stats = ensemble_bayesian_run(
        cfg.ensemble.copies.max(1),
        &system,
        &sme,
        &rho0,
        cfg.episode.steps_per_episode,
        cfg.ensemble.source,
        &cfg.observation_options(),
        eval_seeds(cfg.seed, 1)[0],
    )?;
    let rows: Vec<EnsembleRow> = stats
        .mean_fidelity
        .iter()
        .zip(&stats.amplitudes)
        .enumerate()
        .map(|(k, (&f, &a))| EnsembleRow {
            step: k,
            t: (k + 1) as f64 * cfg.sme.dt_control,
            mean_fidelity: f,
            amplitude: a,
        })
        .collect();
    write_csv(out.join("ensemble.csv"), &rows)?;
    Ok(stats.episode_mean_fidelity())
}

/// Steady states over `gammas` (default grid when empty) to `markovian.csv`.
pub fn markovian(cfg: &RunConfig, out: &Path, gammas: &[f64]) -> Result<Vec<MarkovianSteadyState>> {
    prepare(out, "markovian", cfg)?;
    let system = cfg.build_system()?;
    let grid = if gammas.is_empty() { &MARKOVIAN_GAMMA_GRID[..] } else { gammas };
    let rows = grid
        .iter()
        .map(|&g| markovian_steady_state(&system, cfg.experiment.markovian_gain, g))
        .collect::<Result<Vec<_>, _>>()?;
    write_csv(out.join("markovian.csv"), &rows)?;
    Ok(rows)
}

/// PPO training: `metrics.csv`, `training_curve.csv` and `checkpoint.bin`.
/// Resuming appends to the existing metrics; a fresh run replaces them.
pub fn train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<Checkpoint> {
    prepare(out, "train", cfg)?;
    let system = Arc::new(cfg.build_system()?);
    let envs = make_envs(cfg, &system, cfg.ppo.n_envs)?;
    let metrics_path = out.join("metrics.csv");
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            ckpt.check_observation_dim(cfg.network_shape().input)?;
            Trainer::resume(ckpt, envs, cfg.seed)?
        }
        None => {
            if metrics_path.exists() {
                std::fs::remove_file(&metrics_path).map_err(io_error(&metrics_path))?;
            }
            Trainer::new(initial_network(cfg, cfg.seed)?, envs, cfg.ppo.clone(), cfg.seed)?
        }
    };
    let ckpt_path = out.join("checkpoint.bin");
    let mut metrics = MetricsWriter::open(&metrics_path)?;
    trainer.train(
        cfg.training.iterations,
        Some(&mut metrics),
        Some((&ckpt_path, cfg.training.checkpoint_every)),
    )?;
    let ckpt = trainer.checkpoint();
    ckpt.save(&ckpt_path)?;
    emit_figure_data(
        FigureKind::TrainingCurve,
        &FigureSource::MetricsFile(metrics_path),
        out.join("training_curve.csv"),
    )?;
    Ok(ckpt)
}

/// Evaluates a checkpoint: `eval.csv` plus traces of the first episode.
pub fn eval(cfg: &RunConfig, out: &Path, checkpoint: &Path) -> Result<Vec<EpisodeRow>> {
    let hash = prepare(out, "eval", cfg)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    ckpt.check_observation_dim(cfg.network_shape().input)?;
    let net = doublewell_rl::ActorCritic::from_params(ckpt.shape.clone(), ckpt.params)?;
    let system = cfg.build_system()?;
    let seeds = eval_seeds(cfg.seed, cfg.evaluation.episodes);
    let records = policy_episodes(cfg, &system, &net, &seeds)?;
    write_traces(&records[0], cfg.sme.dt_control, out, "eval_trajectory")?;
    let rows = episode_table(&records, &seeds, &hash);
    write_csv(out.join("eval.csv"), &rows)?;
    Ok(rows)
}

/// Runs a registered experiment into `<out>/<name>`.
pub fn experiment(cfg: &RunConfig, out: &Path, name: &str, progress: &mut dyn FnMut(&str)) -> Result<ExperimentReport> {
    run_experiment(name, cfg, &out.join(name), progress)
}
