//! The controlled double-well model: operators shared by every trajectory.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::hilbert::{
    double_well_hamiltonian, feedback_operator, ground_state, x_squared, DoubleWellParams,
    FeedbackKind, FockSpace, Operator, PureState,
};

/// Random number generator used by every stochastic component.
pub type SimRng = ChaCha8Rng;

/// Independent stream `stream` of the generator seeded by `master_seed`.
pub fn stream_rng(master_seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub dim: usize,
    pub kbar: f64,
    pub well: DoubleWellParams,
    pub feedback: FeedbackKind,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            dim: 60,
            kbar: 1.0,
            well: DoubleWellParams::default(),
            feedback: FeedbackKind::XpSym,
        }
    }
}

/// Precomputed operators for one `(space, well, feedback)` choice.
#[derive(Debug, Clone)]
pub struct DoubleWellSystem {
    pub space: FockSpace,
    pub params: DoubleWellParams,
    pub feedback_kind: FeedbackKind,
    pub hamiltonian: Operator,
    pub feedback: Operator,
    pub x2: Operator,
    pub ground: PureState,
    pub ground_energy: f64,
}

impl DoubleWellSystem {
    pub fn new(config: &SystemConfig) -> Result<Self> {
        let space = FockSpace::new(config.dim, config.kbar)?;
        let hamiltonian = double_well_hamiltonian(&space, &config.well)?;
        let ground = ground_state(&hamiltonian)?;
        Ok(Self {
            space,
            params: config.well,
            feedback_kind: config.feedback,
            feedback: feedback_operator(config.feedback, &space),
            x2: x_squared(&space),
            hamiltonian,
            ground: ground.state,
            ground_energy: ground.energy,
        })
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    pub fn setpoint(&self) -> f64 {
        self.params.setpoint()
    }
}
