//! Clipped-surrogate PPO loss with its parameter gradient.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, Result};
use crate::network::ActorCritic;
use crate::policy::{gaussian_entropy, log_prob};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub lr: f64,
    pub n_envs: usize,
    /// Steps per worker per iteration.
    pub horizon: usize,
    pub minibatch: usize,
    pub epochs: usize,
    pub discount: f64,
    pub gae_lambda: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            lr: 1e-5,
            n_envs: 8,
            horizon: 4000,
            minibatch: 100,
            epochs: 10,
            discount: 0.99,
            gae_lambda: 0.95,
            value_coef: 0.5,
            entropy_coef: 0.0,
            max_grad_norm: 0.5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(invalid_config("clip_eps", "must lie in (0, 1)"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid_config("lr", "must be positive"));
        }
        for (name, v) in [
            ("n_envs", self.n_envs),
            ("horizon", self.horizon),
            ("minibatch", self.minibatch),
            ("epochs", self.epochs),
        ] {
            if v == 0 {
                return Err(invalid_config(name, "must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.discount) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(invalid_config("discount", "discount and gae_lambda must lie in [0, 1]"));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(invalid_config("max_grad_norm", "must be positive"));
        }
        Ok(())
    }

    /// Fixed-length episodes must tile the rollout horizon.
    pub fn validate_episode_length(&self, steps_per_episode: usize) -> Result<()> {
        if steps_per_episode == 0 || !self.horizon.is_multiple_of(steps_per_episode) {
            return Err(invalid_config(
                "horizon",
                format!("{} is not a multiple of the episode length {steps_per_episode}", self.horizon),
            ));
        }
        Ok(())
    }
}

/// Flattened rollout: sample `i` owns `obs[i * obs_dim..(i + 1) * obs_dim]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBatch {
    pub obs_dim: usize,
    pub obs: Vec<f64>,
    pub pre_squash: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub log_prob_old: Vec<f64>,
    pub reward: Vec<f64>,
    pub value_old: Vec<f64>,
    pub advantage: Vec<f64>,
    pub return_target: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.pre_squash.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pre_squash.is_empty()
    }

    /// `obs_dim × indices.len()` observation matrix.
    pub fn obs_matrix(&self, indices: &[usize]) -> DMatrix<f64> {
        let d = self.obs_dim;
        DMatrix::from_fn(d, indices.len(), |r, c| self.obs[indices[c] * d + r])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub grad: Vec<f64>,
}

/// Loss on the samples `indices` of `batch` and its gradient:
/// `−mean min(r Â, clip(r, 1 ± ε) Â) + c_v mean (V − R)² − c_e H`.
pub fn ppo_loss(net: &ActorCritic, batch: &RolloutBatch, indices: &[usize], cfg: &PpoConfig) -> Result<LossReport> {
    let b = indices.len();
    if b == 0 {
        return Err(invalid_config("minibatch", "empty minibatch"));
    }
    let bf = b as f64;
    let cache = net.forward_batch(&batch.obs_matrix(indices))?;
    let log_std = net.log_std();
    let sigma2 = (2.0 * log_std).exp();

    let mut d_mean = vec![0.0; b];
    let mut d_value = vec![0.0; b];
    let mut d_log_std = 0.0;
    let (mut policy, mut value, mut clipped) = (0.0, 0.0, 0usize);
    for (k, &i) in indices.iter().enumerate() {
        let u = batch.pre_squash[i];
        let adv = batch.advantage[i];
        let mean = cache.mean[k];
        let ratio = (log_prob(u, mean, log_std) - batch.log_prob_old[i]).exp();
        let bounded = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
        if (ratio - 1.0).abs() > cfg.clip_eps {
            clipped += 1;
        }
        let unclipped_term = ratio * adv;
        let clipped_term = bounded * adv;
        policy -= unclipped_term.min(clipped_term) / bf;
        if unclipped_term <= clipped_term {
            // d(−r Â / B)/d log π = −r Â / B
            let g = -unclipped_term / bf;
            let z = u - mean;
            d_mean[k] = g * z / sigma2;
            d_log_std += g * (z * z / sigma2 - 1.0);
        }
        let err = cache.value[k] - batch.return_target[i];
        value += err * err / bf;
        d_value[k] = cfg.value_coef * 2.0 * err / bf;
    }
    let entropy = gaussian_entropy(log_std);
    d_log_std -= cfg.entropy_coef;
    let total = policy + cfg.value_coef * value - cfg.entropy_coef * entropy;

    let mut grad = vec![0.0; net.params().len()];
    net.backward(&cache, &d_mean, &d_value, d_log_std, &mut grad);
    Ok(LossReport {
        total,
        policy,
        value,
        entropy,
        clip_fraction: clipped as f64 / bf,
        grad,
    })
}
