//! Run configuration: one TOML tree mirroring the typed configs of `core`
//! and `rl`, layered as scale preset, then file, then `--set` overrides.

use std::path::Path;

use doublewell_core::control::EstimateSource;
use doublewell_core::{
    ControllerSpec, DoubleWellSystem, EpisodeConfig, FeatureLayout, ObservationOptions, SmeConfig, SystemConfig,
};
use doublewell_rl::{NetworkShape, PpoConfig};
use serde::{Deserialize, Serialize};

use crate::error::{io_error, BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    /// dim 30, 200-step episodes.
    Desk,
    /// dim 60, 1000-step episodes.
    Full,
}

/// How sweep experiments produce a fidelity for each parameter value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentKind {
    /// Train a PPO policy per replicate, then evaluate it deterministically.
    Drl,
    /// Run the configured `[controller]`.
    Controller,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub iterations: usize,
    pub initial_log_std: f64,
    /// Checkpoint period in iterations; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub shared: usize,
    pub actor: Vec<usize>,
    pub critic: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub episodes: usize,
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    /// Copies per ensemble run; 0 drops ensemble rows from experiments.
    pub copies: usize,
    pub source: EstimateSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub replicates: usize,
    /// Overrides the experiment's own default agent.
    pub agent: Option<AgentKind>,
    /// Adds a trained-policy row to the Bayesian table.
    pub include_drl: bool,
    pub markovian_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scale: Scale,
    pub system: SystemConfig,
    pub sme: SmeConfig,
    pub episode: EpisodeConfig,
    pub controller: ControllerSpec,
    pub ppo: PpoConfig,
    pub training: TrainingConfig,
    pub evaluation: EvaluationConfig,
    pub ensemble: EnsembleConfig,
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    pub fn preset(scale: Scale) -> Self {
        let desk = scale == Scale::Desk;
        let system = SystemConfig {
            dim: if desk { 30 } else { 60 },
            ..SystemConfig::default()
        };
        let sme = SmeConfig {
            n_substeps: if desk { 10 } else { 20 },
            ..SmeConfig::default()
        };
        let episode = EpisodeConfig {
            steps_per_episode: if desk { 200 } else { 1000 },
            normalize_observations: desk,
            ..EpisodeConfig::default()
        };
        let ppo = if desk {
            PpoConfig {
                lr: 3e-4,
                horizon: 200,
                ..PpoConfig::default()
            }
        } else {
            PpoConfig::default()
        };
        let standard = NetworkShape::standard(FeatureLayout::DIM);
        Self {
            seed: 0,
            scale,
            system,
            sme,
            episode,
            controller: ControllerSpec::Bayesian {
                source: EstimateSource::ConditionalMean,
            },
            ppo,
            training: TrainingConfig {
                iterations: if desk { 100 } else { 300 },
                initial_log_std: 0.0,
                checkpoint_every: 25,
                shared: standard.shared,
                actor: standard.actor,
                critic: standard.critic,
            },
            evaluation: EvaluationConfig {
                episodes: 20,
                deterministic: true,
            },
            ensemble: EnsembleConfig {
                copies: if desk { 100 } else { 1000 },
                source: EstimateSource::Current,
            },
            experiment: ExperimentConfig {
                replicates: 3,
                agent: None,
                include_drl: false,
                markovian_gain: 0.05,
            },
        }
    }

    /// Preset for `scale`, then the optional file, then `key.path=value`
    /// overrides. Unknown keys anywhere are errors.
    pub fn load(scale: Scale, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = to_tree(&Self::preset(scale))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(io_error(path))?;
            let layer: toml::Table = toml::from_str(&text)
                .map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut tree, layer);
        }
        for raw in overrides {
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| BenchError::Config(format!("override `{raw}` is not key=value")))?;
            set_path(&mut tree, key.trim(), parse_value(value.trim()))?;
        }
        Self::from_tree(tree)
    }

    pub fn from_tree(tree: toml::Table) -> Result<Self> {
        let cfg: Self = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| BenchError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| BenchError::Config(e.to_string()))
    }

    /// Copy with one dotted path replaced, validated like a loaded config.
    pub fn with_override(&self, key: &str, value: toml::Value) -> Result<Self> {
        let mut tree = to_tree(self)?;
        set_path(&mut tree, key, value)?;
        Self::from_tree(tree)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(BenchError::Config(format!("seed {} exceeds {}", self.seed, i64::MAX)));
        }
        self.system.well.validate()?;
        self.sme.validate()?;
        self.episode.validate()?;
        self.ppo.validate()?;
        self.ppo.validate_episode_length(self.episode.steps_per_episode)?;
        self.network_shape().validate()?;
        if self.evaluation.episodes == 0 {
            return Err(BenchError::Config("evaluation.episodes must be >= 1".into()));
        }
        if self.experiment.replicates == 0 {
            return Err(BenchError::Config("experiment.replicates must be >= 1".into()));
        }
        Ok(())
    }

    pub fn build_system(&self) -> Result<DoubleWellSystem> {
        Ok(DoubleWellSystem::new(&self.system)?)
    }

    /// SME settings with enough substeps for the measured observable.
    pub fn sme_for(&self, system: &DoubleWellSystem) -> SmeConfig {
        self.sme.clone().stabilized(&system.x2)
    }

    /// Observation options, exposing simulator internals when the
    /// configured controller reads them.
    pub fn observation_options(&self) -> ObservationOptions {
        let mut options = self.episode.observation;
        options.expose_privileged |= self.controller.needs_privileged();
        options
    }

    pub fn network_shape(&self) -> NetworkShape {
        NetworkShape {
            input: FeatureLayout::DIM,
            shared: self.training.shared,
            actor: self.training.actor.clone(),
            critic: self.training.critic.clone(),
        }
    }

    pub fn feature_layout(&self) -> FeatureLayout {
        FeatureLayout {
            input: self.episode.policy_input,
            gain: self.sme.measurement.gain,
            setpoint: self.system.well.setpoint(),
            normalize: self.episode.normalize_observations,
        }
    }
}

fn to_tree(cfg: &RunConfig) -> Result<toml::Table> {
    toml::Table::try_from(cfg).map_err(|e| BenchError::Config(e.to_string()))
}

/// Tables merge key by key; every other value replaces.
fn merge(base: &mut toml::Table, layer: toml::Table) {
    for (key, value) in layer {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(l)) => merge(b, l),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

/// TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(tree: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| BenchError::Config("empty key".into()))?;
    let mut node = tree;
    for part in parts {
        node = match node.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new())) {
            toml::Value::Table(t) => t,
            _ => return Err(BenchError::Config(format!("`{part}` in `{key}` is not a table"))),
        };
    }
    node.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for scale in [Scale::Desk, Scale::Full] {
            let cfg = RunConfig::preset(scale);
            cfg.validate().unwrap();
            let text = cfg.to_toml().unwrap();
            let back: RunConfig = toml::from_str(&text).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn overrides_apply_in_order() {
        let cfg = RunConfig::load(
            Scale::Desk,
            None,
            &["sme.measurement.gamma_meas=0.3".into(), "controller.source=current".into()],
        )
        .unwrap();
        assert_eq!(cfg.sme.measurement.gamma_meas, 0.3);
        assert_eq!(
            cfg.controller,
            ControllerSpec::Bayesian {
                source: EstimateSource::Current
            }
        );
        assert_eq!(cfg.system.dim, 30);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::load(Scale::Desk, None, &["sme.gamma=0.3".into()]).unwrap_err();
        assert!(err.to_string().contains("gamma"), "{err}");
        let err = RunConfig::load(Scale::Desk, None, &["nonsense=1".into()]).unwrap_err();
        assert!(err.to_string().contains("nonsense"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::load(Scale::Desk, None, &["ppo.horizon=150".into()]).is_err());
        assert!(RunConfig::load(Scale::Desk, None, &["sme.measurement.eta=1.5".into()]).is_err());
    }
}
