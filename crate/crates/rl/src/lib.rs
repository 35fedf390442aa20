//! Proximal policy optimization for the double-well environments.
//!
//! A shared-trunk actor-critic ([`network`]) drives a tanh-squashed Gaussian
//! policy ([`policy`]). [`trainer::Trainer`] steps several workers in lockstep,
//! estimates advantages ([`gae`]) and minimizes the clipped surrogate
//! ([`loss`]) with Adam ([`optim`]).

pub mod checkpoint;
pub mod error;
pub mod evaluate;
pub mod gae;
pub mod loss;
pub mod network;
pub mod optim;
pub mod policy;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use error::{Result, RlError};
pub use evaluate::{evaluate, EpisodeEvaluation, EvaluationSummary, PolicyController};
pub use loss::{ppo_loss, PpoConfig, RolloutBatch};
pub use network::{ActorCritic, NetworkShape};
pub use trainer::{IterationMetrics, MetricsWriter, Trainer};
