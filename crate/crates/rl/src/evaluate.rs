//! Policy rollouts without learning, and the policy as a [`Controller`].

use doublewell_core::{ControlAction, ControlObservation, Controller, Episodic, FeatureLayout, SimRng};
use rand::Rng;
use serde::Serialize;

use crate::error::{RlError, Result};
use crate::network::ActorCritic;
use crate::policy::sample_action;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeEvaluation {
    pub episode: usize,
    pub seed: u64,
    pub steps: usize,
    pub total_reward: f64,
    pub mean_reward: f64,
    pub mean_fidelity: Option<f64>,
    pub max_fidelity: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvaluationSummary {
    pub episodes: usize,
    pub mean_total_reward: f64,
    /// Mean over episodes of the per-episode mean fidelity.
    pub mean_fidelity: Option<f64>,
    /// Best per-episode mean fidelity.
    pub max_fidelity: Option<f64>,
}

impl EvaluationSummary {
    pub fn from_episodes(rows: &[EpisodeEvaluation]) -> Self {
        let n = rows.len();
        let fids: Vec<f64> = rows.iter().filter_map(|r| r.mean_fidelity).collect();
        Self {
            episodes: n,
            mean_total_reward: rows.iter().map(|r| r.total_reward).sum::<f64>() / n.max(1) as f64,
            mean_fidelity: (!fids.is_empty()).then(|| fids.iter().sum::<f64>() / fids.len() as f64),
            max_fidelity: fids.iter().cloned().reduce(f64::max),
        }
    }
}

/// One episode per seed. Stochastic mode draws actions from `rng`.
pub fn evaluate<E: Episodic, R: Rng>(
    net: &ActorCritic,
    env: &mut E,
    seeds: &[u64],
    deterministic: bool,
    rng: &mut R,
) -> Result<Vec<EpisodeEvaluation>> {
    if env.observation_dim() != net.shape().input {
        return Err(RlError::ShapeMismatch {
            what: "observation",
            expected: net.shape().input,
            found: env.observation_dim(),
        });
    }
    let log_std = net.log_std();
    let mut rows = Vec::with_capacity(seeds.len());
    for (episode, &seed) in seeds.iter().enumerate() {
        let mut obs = env.reset(seed)?;
        let (mut steps, mut total) = (0usize, 0.0);
        let (mut fid_sum, mut fid_max, mut fid_n) = (0.0, f64::NEG_INFINITY, 0usize);
        loop {
            let (mean, _, _) = net.forward(&obs)?;
            let a = sample_action(mean, log_std, deterministic, rng);
            let tr = env.step(a.amplitude)?;
            steps += 1;
            total += tr.reward;
            if let Some(f) = tr.fidelity {
                fid_sum += f;
                fid_max = fid_max.max(f);
                fid_n += 1;
            }
            obs = tr.observation;
            if tr.done {
                break;
            }
        }
        rows.push(EpisodeEvaluation {
            episode,
            seed,
            steps,
            total_reward: total,
            mean_reward: total / steps as f64,
            mean_fidelity: (fid_n > 0).then(|| fid_sum / fid_n as f64),
            max_fidelity: (fid_n > 0).then_some(fid_max),
        });
    }
    Ok(rows)
}

/// Trained policy driving the feedback amplitude from controller
/// observations, using the same feature layout as the environment.
pub struct PolicyController {
    net: ActorCritic,
    layout: FeatureLayout,
    deterministic: bool,
}

impl PolicyController {
    pub fn new(net: ActorCritic, layout: FeatureLayout, deterministic: bool) -> Result<Self> {
        if net.shape().input != FeatureLayout::DIM {
            return Err(RlError::ShapeMismatch {
                what: "observation",
                expected: FeatureLayout::DIM,
                found: net.shape().input,
            });
        }
        Ok(Self {
            net,
            layout,
            deterministic,
        })
    }
}

impl Controller for PolicyController {
    fn act(&mut self, obs: &ControlObservation, rng: &mut SimRng) -> doublewell_core::Result<ControlAction> {
        let features = self.layout.features(obs)?;
        let (mean, log_std, _) = self
            .net
            .forward(&features)
            .map_err(|e| doublewell_core::Error::InvalidState(e.to_string()))?;
        let a = sample_action(mean, log_std, self.deterministic, rng);
        Ok(ControlAction::clipped(a.amplitude))
    }

    fn name(&self) -> &str {
        "drl"
    }
}
