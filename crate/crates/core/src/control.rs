//! Controller interface and the non-learning feedback laws.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::hilbert::{fidelity, DensityMatrix};
use crate::sme::{mean, SmeConfig, SmeStepper};
use crate::system::{stream_rng, DoubleWellSystem, SimRng};

/// Feedback amplitudes are confined to `[-AMPLITUDE_BOUND, AMPLITUDE_BOUND]`.
pub const AMPLITUDE_BOUND: f64 = 5.0;

/// What a controller sees before choosing the next amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlObservation {
    /// Mean of the last (up to `window`) measurement currents.
    pub current_mean: f64,
    /// Amplitude applied during the previous interval.
    pub last_action: f64,
    /// `<x²>_c`, present only when the run exposes simulator internals.
    pub expect_x2: Option<f64>,
    pub fidelity: Option<f64>,
}

impl ControlObservation {
    pub fn validate(&self) -> Result<()> {
        if !self.current_mean.is_finite() {
            return Err(invalid("current_mean", "must be finite"));
        }
        if !(self.last_action.abs() <= AMPLITUDE_BOUND) {
            return Err(invalid("last_action", format!("{} outside [-5, 5]", self.last_action)));
        }
        Ok(())
    }
}

/// Feedback strength multiplying the generator; always within the bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlAction(f64);

impl ControlAction {
    /// Clips into `[-5, 5]`; non-finite requests map to zero.
    pub fn clipped(amplitude: f64) -> Self {
        if amplitude.is_nan() {
            return Self(0.0);
        }
        Self(amplitude.clamp(-AMPLITUDE_BOUND, AMPLITUDE_BOUND))
    }

    pub fn amplitude(self) -> f64 {
        self.0
    }
}

pub trait Controller {
    fn act(&mut self, obs: &ControlObservation, rng: &mut SimRng) -> Result<ControlAction>;

    fn name(&self) -> &str;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservationOptions {
    /// Number of recent currents averaged into the observation.
    pub window: usize,
    /// Attach `<x²>_c` and the fidelity to every observation.
    pub expose_privileged: bool,
}

impl Default for ObservationOptions {
    fn default() -> Self {
        Self {
            window: 4,
            expose_privileged: false,
        }
    }
}

/// Builds observations from the measurement record as it arrives.
#[derive(Debug, Clone)]
pub struct ObservationTracker {
    currents: VecDeque<f64>,
    window: usize,
    last_action: f64,
    expose: bool,
    expect_x2: f64,
    fidelity: f64,
}

impl ObservationTracker {
    /// Starts the window with one noiseless `primed` current.
    pub fn new(options: &ObservationOptions, primed: f64) -> Self {
        let window = options.window.max(1);
        let mut currents = VecDeque::with_capacity(window);
        currents.push_back(primed);
        Self {
            currents,
            window,
            last_action: 0.0,
            expose: options.expose_privileged,
            expect_x2: f64::NAN,
            fidelity: f64::NAN,
        }
    }

    pub fn record(&mut self, current: f64, action: f64) {
        if self.currents.len() == self.window {
            self.currents.pop_front();
        }
        self.currents.push_back(current);
        self.last_action = action;
    }

    pub fn set_privileged(&mut self, expect_x2: f64, fidelity: f64) {
        self.expect_x2 = expect_x2;
        self.fidelity = fidelity;
    }

    pub fn current_mean(&self) -> f64 {
        self.currents.iter().sum::<f64>() / self.currents.len() as f64
    }

    pub fn window_len(&self) -> usize {
        self.currents.len()
    }

    pub fn observation(&self) -> ControlObservation {
        ControlObservation {
            current_mean: self.current_mean(),
            last_action: self.last_action,
            expect_x2: self.expose.then_some(self.expect_x2),
            fidelity: self.expose.then_some(self.fidelity),
        }
    }
}

/// `clip(-(estimate - b²), -5, 5)`.
pub fn bayesian_amplitude(estimate_x2: f64, b: f64) -> f64 {
    ControlAction::clipped(-(estimate_x2 - b * b)).amplitude()
}

#[derive(Debug, Clone, Default)]
pub struct NullController;

impl Controller for NullController {
    fn act(&mut self, obs: &ControlObservation, _rng: &mut SimRng) -> Result<ControlAction> {
        obs.validate()?;
        Ok(ControlAction::clipped(0.0))
    }

    fn name(&self) -> &str {
        "null"
    }
}

/// Uniform amplitudes over the admissible range.
#[derive(Debug, Clone, Default)]
pub struct RandomController;

impl Controller for RandomController {
    fn act(&mut self, obs: &ControlObservation, rng: &mut SimRng) -> Result<ControlAction> {
        obs.validate()?;
        Ok(ControlAction::clipped(rng.random_range(-AMPLITUDE_BOUND..=AMPLITUDE_BOUND)))
    }

    fn name(&self) -> &str {
        "random"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateSource {
    /// Exact `<x²>_c` from the simulator.
    ConditionalMean,
    /// Windowed measurement current divided by the record gain.
    Current,
}

/// Feedback on the error between an estimate of `<x²>` and the setpoint `b²`.
#[derive(Debug, Clone)]
pub struct BayesianController {
    pub source: EstimateSource,
    pub well_position: f64,
    pub feedback_gain: f64,
    pub measurement_gain: f64,
}

impl BayesianController {
    pub fn new(source: EstimateSource, well_position: f64, measurement_gain: f64) -> Self {
        Self {
            source,
            well_position,
            feedback_gain: 1.0,
            measurement_gain,
        }
    }

    pub fn estimate(&self, obs: &ControlObservation) -> Result<f64> {
        match self.source {
            EstimateSource::ConditionalMean => obs.expect_x2.ok_or(Error::MissingPrivilegedField("expect_x2")),
            EstimateSource::Current => Ok(obs.current_mean / self.measurement_gain),
        }
    }
}

impl Controller for BayesianController {
    fn act(&mut self, obs: &ControlObservation, _rng: &mut SimRng) -> Result<ControlAction> {
        obs.validate()?;
        let estimate = self.estimate(obs)?;
        let b2 = self.well_position * self.well_position;
        Ok(ControlAction::clipped(-self.feedback_gain * (estimate - b2)))
    }

    fn name(&self) -> &str {
        match self.source {
            EstimateSource::ConditionalMean => "bayesian-conditional-mean",
            EstimateSource::Current => "bayesian-current",
        }
    }
}

/// Direct feedback proportional to the latest record value (use with a
/// one-step observation window).
#[derive(Debug, Clone)]
pub struct MarkovianController {
    pub gain: f64,
    pub setpoint: f64,
    pub measurement_gain: f64,
}

impl Controller for MarkovianController {
    fn act(&mut self, obs: &ControlObservation, _rng: &mut SimRng) -> Result<ControlAction> {
        obs.validate()?;
        Ok(ControlAction::clipped(
            -self.gain * (obs.current_mean / self.measurement_gain - self.setpoint),
        ))
    }

    fn name(&self) -> &str {
        "markovian"
    }
}

/// Serializable controller choice for run configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ControllerSpec {
    Null,
    Random,
    Bayesian { source: EstimateSource },
    Markovian { gain: f64 },
}

impl ControllerSpec {
    pub fn build(&self, system: &DoubleWellSystem, cfg: &SmeConfig) -> Box<dyn Controller + Send> {
        let gain = cfg.measurement.gain;
        match self {
            ControllerSpec::Null => Box::new(NullController),
            ControllerSpec::Random => Box::new(RandomController),
            ControllerSpec::Bayesian { source } => {
                Box::new(BayesianController::new(*source, system.params.b, gain))
            }
            ControllerSpec::Markovian { gain: k } => Box::new(MarkovianController {
                gain: *k,
                setpoint: system.setpoint(),
                measurement_gain: gain,
            }),
        }
    }

    /// Whether the controller reads simulator internals.
    pub fn needs_privileged(&self) -> bool {
        matches!(
            self,
            ControllerSpec::Bayesian {
                source: EstimateSource::ConditionalMean
            }
        )
    }
}

/// Outcome of a lockstep ensemble under one shared feedback amplitude.
#[derive(Debug, Clone)]
pub struct EnsembleStats {
    /// Fidelity after every step, per copy.
    pub copy_fidelities: Vec<Vec<f64>>,
    /// Ensemble-mean fidelity after every step.
    pub mean_fidelity: Vec<f64>,
    /// Shared amplitude applied at every step.
    pub amplitudes: Vec<f64>,
}

impl EnsembleStats {
    /// Fidelity averaged over copies and steps.
    pub fn episode_mean_fidelity(&self) -> f64 {
        mean(&self.mean_fidelity)
    }

    pub fn copy_mean_fidelities(&self) -> Vec<f64> {
        self.copy_fidelities.iter().map(|f| mean(f)).collect()
    }
}

/// `n_copies` trajectories from `rho0`, each with its own noise stream
/// (`stream_rng(seed, copy)`), advanced in lockstep. Every interval the shared
/// amplitude is the Bayesian law applied to the ensemble-mean estimate.
pub fn ensemble_bayesian_run(
    n_copies: usize,
    system: &DoubleWellSystem,
    cfg: &SmeConfig,
    rho0: &DensityMatrix,
    horizon: usize,
    source: EstimateSource,
    options: &ObservationOptions,
    seed: u64,
) -> Result<EnsembleStats> {
    if n_copies == 0 {
        return Err(invalid("n_copies", "must be >= 1"));
    }
    if horizon == 0 {
        return Err(invalid("horizon", "must be >= 1"));
    }
    let mut stepper = SmeStepper::for_system(system, cfg)?;
    let gain = cfg.measurement.gain;
    let x2_0 = rho0.expect(&system.x2)?;
    let mut states = vec![rho0.clone(); n_copies];
    let mut rngs: Vec<SimRng> = (0..n_copies).map(|k| stream_rng(seed, k as u64)).collect();
    let mut trackers = vec![ObservationTracker::new(options, gain * x2_0); n_copies];
    let mut x2_now = vec![x2_0; n_copies];
    let controller = BayesianController::new(source, system.params.b, gain);

    let mut stats = EnsembleStats {
        copy_fidelities: vec![Vec::with_capacity(horizon); n_copies],
        mean_fidelity: Vec::with_capacity(horizon),
        amplitudes: Vec::with_capacity(horizon),
    };
    for step in 0..horizon {
        let estimate = match source {
            EstimateSource::ConditionalMean => mean(&x2_now),
            EstimateSource::Current => {
                trackers.iter().map(|t| t.current_mean()).sum::<f64>() / (n_copies as f64 * gain)
            }
        };
        let b2 = controller.well_position * controller.well_position;
        let amplitude = ControlAction::clipped(-controller.feedback_gain * (estimate - b2)).amplitude();
        let mut fid_sum = 0.0;
        for copy in 0..n_copies {
            let out = stepper
                .step(&mut states[copy], amplitude, &mut rngs[copy])
                .map_err(|e| Error::CopyAborted {
                    copy,
                    source: Box::new(Error::TrajectoryAborted {
                        step,
                        source: Box::new(e),
                    }),
                })?;
            trackers[copy].record(out.current, amplitude);
            x2_now[copy] = states[copy].expect(&system.x2)?;
            let fid = fidelity(&states[copy], &system.ground)?;
            stats.copy_fidelities[copy].push(fid);
            fid_sum += fid;
        }
        stats.mean_fidelity.push(fid_sum / n_copies as f64);
        stats.amplitudes.push(amplitude);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn obs(current: f64, x2: Option<f64>) -> ControlObservation {
        ControlObservation {
            current_mean: current,
            last_action: 0.0,
            expect_x2: x2,
            fidelity: None,
        }
    }

    #[test]
    fn bayesian_amplitude_cases() {
        assert_eq!(bayesian_amplitude(9.0, 3.0), 0.0);
        assert_eq!(bayesian_amplitude(25.0, 3.0), -5.0);
        assert_eq!(bayesian_amplitude(4.0, 3.0), 5.0);
    }

    #[test]
    fn null_and_random_controllers() {
        let mut rng = stream_rng(0, 0);
        let a = NullController.act(&obs(3.0, None), &mut rng).unwrap();
        assert_eq!(a.amplitude(), 0.0);

        let draw = |seed| {
            let mut rng = stream_rng(seed, 0);
            (0..20)
                .map(|_| RandomController.act(&obs(0.0, None), &mut rng).unwrap().amplitude())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11), draw(12));
    }

    #[test]
    fn conditional_mean_needs_privileged_field() {
        let mut rng = stream_rng(0, 0);
        let mut c = BayesianController::new(EstimateSource::ConditionalMean, 3.0, 1.0);
        assert!(matches!(
            c.act(&obs(9.0, None), &mut rng),
            Err(Error::MissingPrivilegedField("expect_x2"))
        ));
        assert_eq!(c.act(&obs(0.0, Some(9.0)), &mut rng).unwrap().amplitude(), 0.0);
    }

    #[test]
    fn tracker_window_grows_then_slides() {
        let mut t = ObservationTracker::new(&ObservationOptions::default(), 2.0);
        assert_eq!(t.current_mean(), 2.0);
        t.record(4.0, 1.0);
        assert_eq!(t.window_len(), 2);
        assert_eq!(t.current_mean(), 3.0);
        t.record(6.0, 1.0);
        t.record(8.0, 1.0);
        assert_eq!(t.current_mean(), 5.0);
        t.record(10.0, -1.0);
        assert_eq!(t.window_len(), 4);
        assert_eq!(t.current_mean(), 7.0);
        assert_eq!(t.observation().last_action, -1.0);
        assert!(t.observation().expect_x2.is_none());
    }

    proptest! {
        #[test]
        fn amplitudes_stay_bounded(current in -1e6f64..1e6, x2 in -1e6f64..1e6, last in -5.0f64..5.0) {
            let mut rng = stream_rng(1, 0);
            let o = ControlObservation { current_mean: current, last_action: last, expect_x2: Some(x2), fidelity: Some(0.5) };
            let mut controllers: Vec<Box<dyn Controller>> = vec![
                Box::new(NullController),
                Box::new(RandomController),
                Box::new(BayesianController::new(EstimateSource::ConditionalMean, 3.0, 1.0)),
                Box::new(BayesianController::new(EstimateSource::Current, 3.0, 1.0)),
                Box::new(MarkovianController { gain: 2.0, setpoint: 9.0, measurement_gain: 1.0 }),
            ];
            for c in controllers.iter_mut() {
                let a = c.act(&o, &mut rng).unwrap().amplitude();
                prop_assert!((-5.0..=5.0).contains(&a));
            }
        }

        #[test]
        fn bayesian_is_odd_about_setpoint(delta in -100.0f64..100.0) {
            let up = bayesian_amplitude(9.0 + delta, 3.0);
            let down = bayesian_amplitude(9.0 - delta, 3.0);
            prop_assert!((up + down).abs() <= 1e-12);
        }
    }
}
