//! Double-well quantum system under continuous `x²` measurement with feedback.
//!
//! [`hilbert`] builds operators and states in a truncated Fock basis, [`sme`]
//! integrates the conditional state, [`control`] holds hand-written feedback
//! laws and [`env`] wraps everything as episodic environments.

pub mod control;
pub mod env;
pub mod error;
pub mod hilbert;
pub mod record;
pub mod sme;
pub mod sparse;
pub mod system;

pub use control::{ControlAction, ControlObservation, Controller, ControllerSpec, ObservationOptions};
pub use env::{
    EpisodeConfig, Episodic, FeatureLayout, InitialStateSpec, InvertedOscillator, PolicyInput, QuantumEnv, RewardKind,
    Transition,
};
pub use error::{Error, Result};
pub use hilbert::{DensityMatrix, DoubleWellParams, FeedbackKind, FockSpace, Operator, Parity, PureState};
pub use sme::{SmeConfig, SmeStepper};
pub use system::{stream_rng, DoubleWellSystem, SimRng, SystemConfig};
