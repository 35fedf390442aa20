//! Building blocks shared by the commands and the experiments: seeding,
//! environments, training, and closed-loop episodes.

use std::path::Path;
use std::sync::Arc;

use doublewell_core::sme::{evolve_trajectory, TrajectoryRecord};
use doublewell_core::{stream_rng, Controller, DoubleWellSystem, QuantumEnv};
use doublewell_rl::{ActorCritic, IterationMetrics, MetricsWriter, PolicyController, Trainer};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Result;

const EVAL_STREAM: u64 = 0xe7a1;
const REPLICATE_STREAM: u64 = 0x5eed;
const INIT_STREAM: u64 = 0x1417;

/// Episode seeds for evaluation, shared by every parameter value.
pub fn eval_seeds(master: u64, n: usize) -> Vec<u64> {
    let mut rng = stream_rng(master, EVAL_STREAM);
    (0..n).map(|_| next_seed(&mut rng)).collect()
}

/// Independent master seed for replicate `k`.
pub fn replicate_seed(master: u64, k: usize) -> u64 {
    let mut rng = stream_rng(master, REPLICATE_STREAM);
    (0..=k).map(|_| next_seed(&mut rng)).last().expect("non-empty range")
}

/// Seeds stay below 2⁶³ so they survive TOML manifests.
fn next_seed(rng: &mut impl RngCore) -> u64 {
    rng.next_u64() >> 1
}

pub fn make_envs(cfg: &RunConfig, system: &Arc<DoubleWellSystem>, n: usize) -> Result<Vec<QuantumEnv>> {
    let sme = cfg.sme_for(system);
    (0..n)
        .map(|_| Ok(QuantumEnv::new(system.clone(), sme.clone(), cfg.episode.clone())?))
        .collect()
}

pub fn initial_network(cfg: &RunConfig, seed: u64) -> Result<ActorCritic> {
    let mut rng = stream_rng(seed, INIT_STREAM);
    Ok(ActorCritic::init(cfg.network_shape(), cfg.training.initial_log_std, &mut rng)?)
}

/// Fresh PPO run of `cfg.training.iterations` iterations.
pub fn train_policy(
    cfg: &RunConfig,
    system: &Arc<DoubleWellSystem>,
    seed: u64,
    metrics: Option<&mut MetricsWriter>,
    checkpoints: Option<(&Path, usize)>,
) -> Result<(Trainer<QuantumEnv>, Vec<IterationMetrics>)> {
    let net = initial_network(cfg, seed)?;
    let envs = make_envs(cfg, system, cfg.ppo.n_envs)?;
    let mut trainer = Trainer::new(net, envs, cfg.ppo.clone(), seed)?;
    let history = trainer.train(cfg.training.iterations, metrics, checkpoints)?;
    Ok((trainer, history))
}

/// One closed-loop trajectory per seed under `controller`.
pub fn run_episodes(
    cfg: &RunConfig,
    system: &DoubleWellSystem,
    controller: &mut dyn Controller,
    seeds: &[u64],
) -> Result<Vec<TrajectoryRecord>> {
    let sme = cfg.sme_for(system);
    let rho0 = cfg.episode.initial_state.build(system)?;
    let options = cfg.observation_options();
    seeds
        .iter()
        .map(|&seed| {
            let mut rng = stream_rng(seed, 0);
            Ok(evolve_trajectory(
                &rho0,
                controller,
                system,
                &sme,
                cfg.episode.steps_per_episode,
                &options,
                &mut rng,
            )?)
        })
        .collect()
}

pub fn controller_episodes(cfg: &RunConfig, system: &DoubleWellSystem, seeds: &[u64]) -> Result<Vec<TrajectoryRecord>> {
    let sme = cfg.sme_for(system);
    let mut controller = cfg.controller.build(system, &sme);
    run_episodes(cfg, system, controller.as_mut(), seeds)
}

pub fn policy_episodes(
    cfg: &RunConfig,
    system: &DoubleWellSystem,
    net: &ActorCritic,
    seeds: &[u64],
) -> Result<Vec<TrajectoryRecord>> {
    let mut controller = PolicyController::new(net.clone(), cfg.feature_layout(), cfg.evaluation.deterministic)?;
    run_episodes(cfg, system, &mut controller, seeds)
}

/// Per-episode fidelity statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: usize,
    pub seed: u64,
    pub mean_fidelity: f64,
    pub max_fidelity: f64,
    pub final_fidelity: f64,
    pub manifest: String,
}

impl EpisodeRow {
    pub fn from_record(episode: usize, seed: u64, record: &TrajectoryRecord, manifest: &str) -> Self {
        let f = &record.fidelities;
        Self {
            episode,
            seed,
            mean_fidelity: record.mean_fidelity(),
            max_fidelity: f.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            final_fidelity: f.last().copied().unwrap_or(f64::NAN),
            manifest: manifest.to_string(),
        }
    }

    pub fn metrics(&self) -> [(&'static str, f64); 3] {
        [
            ("mean_fidelity", self.mean_fidelity),
            ("max_fidelity", self.max_fidelity),
            ("final_fidelity", self.final_fidelity),
        ]
    }
}
