//! Synchronous multi-worker PPO loop.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use doublewell_core::Episodic;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, RngState};
use crate::error::{RlError, Result};
use crate::gae::{compute_gae, normalize_advantages};
use crate::loss::{ppo_loss, PpoConfig, RolloutBatch};
use crate::network::{obs_matrix, ActorCritic};
use crate::optim::{clip_grad_norm, Adam};
use crate::policy::sample_action;

/// One row of the metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationMetrics {
    /// 1-based.
    pub iteration: usize,
    /// Environment steps taken so far, all workers combined.
    pub steps: u64,
    /// Mean return of episodes finished during this iteration.
    pub mean_reward: f64,
    /// Mean per-step fidelity of those episodes, when the env reports it.
    pub mean_fidelity: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    /// Monte-Carlo estimate of the squashed policy entropy, `−mean log π`.
    pub entropy: f64,
    pub episodes: usize,
    pub incidents: usize,
}

/// An environment step that failed and forced a worker reset.
#[derive(Debug, Clone, PartialEq)]
pub struct Incident {
    pub iteration: usize,
    pub worker: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    pub first_clip_fraction: f64,
    pub minibatches: usize,
}

struct Worker {
    obs: Vec<f64>,
    seeds: ChaCha8Rng,
    ep_return: f64,
    ep_fidelity: f64,
    ep_fidelity_steps: usize,
}

#[derive(Default)]
struct EpisodeTally {
    returns: Vec<f64>,
    fidelities: Vec<f64>,
}

pub struct Trainer<E: Episodic> {
    net: ActorCritic,
    adam: Adam,
    cfg: PpoConfig,
    envs: Vec<E>,
    workers: Vec<Worker>,
    rng: ChaCha8Rng,
    iteration: usize,
    env_steps: u64,
    lr_halved: bool,
    incidents: Vec<Incident>,
    tally: EpisodeTally,
}

impl<E: Episodic> Trainer<E> {
    /// Workers draw episode seeds from their own streams of `seed`; action
    /// sampling and minibatch shuffling use stream 0.
    pub fn new(net: ActorCritic, envs: Vec<E>, cfg: PpoConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if envs.len() != cfg.n_envs {
            return Err(RlError::ShapeMismatch {
                what: "worker count",
                expected: cfg.n_envs,
                found: envs.len(),
            });
        }
        let mut envs = envs;
        let mut workers = Vec::with_capacity(envs.len());
        for (w, env) in envs.iter_mut().enumerate() {
            if env.observation_dim() != net.shape().input {
                return Err(RlError::ShapeMismatch {
                    what: "observation",
                    expected: net.shape().input,
                    found: env.observation_dim(),
                });
            }
            let mut seeds = ChaCha8Rng::seed_from_u64(seed);
            seeds.set_stream(1 + w as u64);
            let obs = env.reset(seeds.random())?;
            workers.push(Worker {
                obs,
                seeds,
                ep_return: 0.0,
                ep_fidelity: 0.0,
                ep_fidelity_steps: 0,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let adam = Adam::new(net.params().len(), cfg.lr);
        Ok(Self {
            net,
            adam,
            cfg,
            envs,
            workers,
            rng,
            iteration: 0,
            env_steps: 0,
            lr_halved: false,
            incidents: Vec::new(),
            tally: EpisodeTally::default(),
        })
    }

    /// Continues from a checkpoint: parameters, optimizer moments, counters
    /// and the sampling stream are restored; workers start fresh episodes.
    pub fn resume(ckpt: Checkpoint, envs: Vec<E>, seed: u64) -> Result<Self> {
        let net = ActorCritic::from_params(ckpt.shape.clone(), ckpt.params.clone())?;
        let mut t = Self::new(net, envs, ckpt.config.clone(), seed)?;
        t.adam = ckpt.adam;
        t.iteration = ckpt.iteration as usize;
        t.env_steps = ckpt.env_steps;
        t.lr_halved = ckpt.lr_halved;
        t.rng = ckpt.rng.restore();
        Ok(t)
    }

    pub fn network(&self) -> &ActorCritic {
        &self.net
    }

    pub fn config(&self) -> &PpoConfig {
        &self.cfg
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn incidents(&self) -> &[Incident] {
        &self.incidents
    }

    pub fn learning_rate(&self) -> f64 {
        self.adam.lr
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            shape: self.net.shape().clone(),
            params: self.net.params().to_vec(),
            adam: self.adam.clone(),
            config: self.cfg.clone(),
            iteration: self.iteration as u64,
            env_steps: self.env_steps,
            lr_halved: self.lr_halved,
            rng: RngState::capture(&self.rng),
        }
    }

    /// Steps every worker `horizon` times with the current policy and
    /// attaches advantages and value targets.
    pub fn collect_rollout(&mut self) -> Result<RolloutBatch> {
        let n_envs = self.envs.len();
        let horizon = self.cfg.horizon;
        let obs_dim = self.net.shape().input;
        let total = n_envs * horizon;
        let mut batch = RolloutBatch {
            obs_dim,
            obs: Vec::with_capacity(total * obs_dim),
            pre_squash: Vec::with_capacity(total),
            amplitude: Vec::with_capacity(total),
            log_prob_old: Vec::with_capacity(total),
            reward: Vec::with_capacity(total),
            value_old: Vec::with_capacity(total),
            advantage: Vec::new(),
            return_target: Vec::new(),
        };
        let mut dones = Vec::with_capacity(total);
        let log_std = self.net.log_std();

        for _ in 0..horizon {
            let rows: Vec<Vec<f64>> = self.workers.iter().map(|w| w.obs.clone()).collect();
            let cache = self.net.forward_batch(&obs_matrix(&rows))?;
            for (w, (env, worker)) in self.envs.iter_mut().zip(&mut self.workers).enumerate() {
                let sample = sample_action(cache.mean[w], log_std, false, &mut self.rng);
                batch.obs.extend_from_slice(&worker.obs);
                batch.pre_squash.push(sample.pre_squash);
                batch.amplitude.push(sample.amplitude);
                batch.log_prob_old.push(sample.log_prob);
                batch.value_old.push(cache.value[w]);

                let (reward, done, next) = match env.step(sample.amplitude) {
                    Ok(tr) => {
                        worker.ep_return += tr.reward;
                        if let Some(f) = tr.fidelity {
                            worker.ep_fidelity += f;
                            worker.ep_fidelity_steps += 1;
                        }
                        (tr.reward, tr.done, tr.observation)
                    }
                    Err(e) => {
                        self.incidents.push(Incident {
                            iteration: self.iteration + 1,
                            worker: w,
                            message: e.to_string(),
                        });
                        (0.0, true, Vec::new())
                    }
                };
                batch.reward.push(reward);
                dones.push(done);
                self.env_steps += 1;
                worker.obs = if done {
                    self.tally.returns.push(worker.ep_return);
                    if worker.ep_fidelity_steps > 0 {
                        self.tally
                            .fidelities
                            .push(worker.ep_fidelity / worker.ep_fidelity_steps as f64);
                    }
                    worker.ep_return = 0.0;
                    worker.ep_fidelity = 0.0;
                    worker.ep_fidelity_steps = 0;
                    env.reset(worker.seeds.random())?
                } else {
                    next
                };
            }
        }

        let rows: Vec<Vec<f64>> = self.workers.iter().map(|w| w.obs.clone()).collect();
        let bootstrap = self.net.forward_batch(&obs_matrix(&rows))?.value;
        batch.advantage = vec![0.0; total];
        batch.return_target = vec![0.0; total];
        for w in 0..n_envs {
            let idx: Vec<usize> = (0..horizon).map(|t| t * n_envs + w).collect();
            let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let d: Vec<bool> = idx.iter().map(|&i| dones[i]).collect();
            let (adv, ret) = compute_gae(
                &pick(&batch.reward),
                &pick(&batch.value_old),
                &d,
                bootstrap[w],
                self.cfg.discount,
                self.cfg.gae_lambda,
            )?;
            for (k, &i) in idx.iter().enumerate() {
                batch.advantage[i] = adv[k];
                batch.return_target[i] = ret[k];
            }
        }
        Ok(batch)
    }

    /// `epochs` passes of shuffled minibatches over `batch`.
    pub fn update(&mut self, batch: &mut RolloutBatch) -> Result<UpdateStats> {
        normalize_advantages(&mut batch.advantage);
        let mut order: Vec<usize> = (0..batch.len()).collect();
        let (mut pl, mut vl, mut cf, mut first) = (0.0, 0.0, 0.0, None);
        let mut count = 0usize;
        for epoch in 0..self.cfg.epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.cfg.minibatch) {
                let mut report = ppo_loss(&self.net, batch, chunk, &self.cfg)?;
                if !report.total.is_finite() || report.grad.iter().any(|g| !g.is_finite()) {
                    return Err(RlError::NonFiniteLoss {
                        iteration: self.iteration + 1,
                        epoch,
                        policy: report.policy,
                        value: report.value,
                    });
                }
                first.get_or_insert(report.clip_fraction);
                clip_grad_norm(&mut report.grad, self.cfg.max_grad_norm);
                self.adam.step(self.net.params_mut(), &report.grad);
                self.net.clamp_log_std();
                pl += report.policy;
                vl += report.value;
                cf += report.clip_fraction;
                count += 1;
            }
        }
        let n = count.max(1) as f64;
        Ok(UpdateStats {
            policy_loss: pl / n,
            value_loss: vl / n,
            clip_fraction: cf / n,
            first_clip_fraction: first.unwrap_or(0.0),
            minibatches: count,
        })
    }

    /// One rollout plus update. A non-finite loss restores the parameters
    /// from before the update and halves the learning rate; a second one
    /// is returned as an error.
    pub fn step_iteration(&mut self) -> Result<IterationMetrics> {
        let incidents_before = self.incidents.len();
        let mut batch = self.collect_rollout()?;
        let entropy = -batch.log_prob_old.iter().sum::<f64>() / batch.len() as f64;
        let snapshot = (self.net.clone(), self.adam.clone());
        let stats = match self.update(&mut batch) {
            Ok(s) => s,
            Err(e @ RlError::NonFiniteLoss { .. }) | Err(e @ RlError::NonFiniteOutput) => {
                if self.lr_halved {
                    return Err(e);
                }
                (self.net, self.adam) = snapshot;
                self.adam.lr *= 0.5;
                self.lr_halved = true;
                UpdateStats {
                    policy_loss: f64::NAN,
                    value_loss: f64::NAN,
                    clip_fraction: f64::NAN,
                    first_clip_fraction: f64::NAN,
                    minibatches: 0,
                }
            }
            Err(e) => return Err(e),
        };
        self.iteration += 1;
        let tally = std::mem::take(&mut self.tally);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Ok(IterationMetrics {
            iteration: self.iteration,
            steps: self.env_steps,
            mean_reward: if tally.returns.is_empty() { f64::NAN } else { mean(&tally.returns) },
            mean_fidelity: (!tally.fidelities.is_empty()).then(|| mean(&tally.fidelities)),
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            clip_fraction: stats.clip_fraction,
            entropy,
            episodes: tally.returns.len(),
            incidents: self.incidents.len() - incidents_before,
        })
    }

    /// Runs `iterations` more iterations, streaming metrics to `metrics`
    /// and checkpointing every `every` iterations when asked.
    pub fn train(
        &mut self,
        iterations: usize,
        mut metrics: Option<&mut MetricsWriter>,
        checkpoints: Option<(&Path, usize)>,
    ) -> Result<Vec<IterationMetrics>> {
        let mut out = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let m = self.step_iteration()?;
            if let Some(w) = metrics.as_deref_mut() {
                w.append(&m)?;
            }
            if let Some((path, every)) = checkpoints {
                if every > 0 && m.iteration % every == 0 {
                    self.checkpoint().save(path)?;
                }
            }
            out.push(m);
        }
        Ok(out)
    }
}

pub const METRICS_HEADER: &str =
    "iteration,steps,mean_reward,mean_fidelity,policy_loss,value_loss,clip_fraction,entropy";

/// Append-only metrics CSV. Missing fidelity is an empty field.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let io = |source| RlError::Io {
            path: path.clone(),
            source,
        };
        let fresh = std::fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
        let mut out = BufWriter::new(file);
        if fresh {
            writeln!(out, "{METRICS_HEADER}").map_err(io)?;
        }
        Ok(Self { path, out })
    }

    pub fn append(&mut self, m: &IterationMetrics) -> Result<()> {
        let fid = m.mean_fidelity.map(|f| f.to_string()).unwrap_or_default();
        writeln!(
            self.out,
            "{},{},{},{},{},{},{},{}",
            m.iteration, m.steps, m.mean_reward, fid, m.policy_loss, m.value_loss, m.clip_fraction, m.entropy
        )
        .and_then(|_| self.out.flush())
        .map_err(|source| RlError::Io {
            path: self.path.clone(),
            source,
        })
    }
}
