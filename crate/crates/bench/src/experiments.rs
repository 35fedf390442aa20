//! Named experiments. Each expands a base configuration into labelled
//! points, runs every point for every replicate, and writes
//!
//! ```text
//! <out>/manifest.toml            base configuration
//! <out>/manifests/<hash>.toml    one per point
//! <out>/tidy.csv                 one row per point, replicate, episode, metric
//! <out>/summary.csv              per point and metric: mean, max, min, replicate range
//! <out>/training/<label>_r<k>.csv   PPO metrics, for trained points
//! <out>/FAILED                   incident log, only when a point failed
//! ```
//!
//! Points run one after another and share nothing but the base seed.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use doublewell_core::control::{ensemble_bayesian_run, EstimateSource};
use doublewell_core::sme::{markovian_steady_state, DecoherenceChannel, DecoherenceKind};
use doublewell_core::{ControllerSpec, FeedbackKind, InitialStateSpec};
use doublewell_rl::MetricsWriter;

use crate::config::{AgentKind, RunConfig};
use crate::dataset::{summarize, write_csv, SummaryRow, TidyRow};
use crate::error::{io_error, BenchError, Result};
use crate::manifest::RunManifest;
use crate::runs::{controller_episodes, eval_seeds, policy_episodes, replicate_seed, train_policy, EpisodeRow};

pub const GAMMA_GRID: [f64; 5] = [0.01, 0.05, 0.1, 0.3, 0.5];
pub const ETA_GRID: [f64; 4] = [0.25, 0.5, 0.75, 1.0];
pub const MARKOVIAN_GAMMA_GRID: [f64; 7] = [0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0];
/// Rate of each single decoherence channel in the comparison.
pub const DECOHERENCE_RATE: f64 = 0.1;

/// How one point turns into rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Runner {
    Agent(AgentKind),
    /// Lockstep ensemble sharing one feedback amplitude.
    Ensemble,
    /// Steady state of the unconditional feedback master equation.
    Markovian,
}

#[derive(Debug, Clone)]
pub struct Point {
    pub label: String,
    pub config: RunConfig,
    pub runner: Runner,
}

pub struct Experiment {
    pub name: &'static str,
    /// Dotted config path (or row label) varied across points.
    pub parameter: &'static str,
    pub description: &'static str,
    pub default_agent: AgentKind,
    expand: fn(&RunConfig, Runner) -> Vec<Point>,
}

impl Experiment {
    pub fn points(&self, base: &RunConfig) -> Vec<Point> {
        let agent = base.experiment.agent.unwrap_or(self.default_agent);
        (self.expand)(base, Runner::Agent(agent))
    }
}

pub static REGISTRY: [Experiment; 7] = [
    Experiment {
        name: "gamma-sweep",
        parameter: "sme.measurement.gamma_meas",
        description: "fidelity against measurement rate",
        default_agent: AgentKind::Drl,
        expand: gamma_points,
    },
    Experiment {
        name: "eta-sweep",
        parameter: "sme.measurement.eta",
        description: "fidelity against detection efficiency",
        default_agent: AgentKind::Drl,
        expand: eta_points,
    },
    Experiment {
        name: "decoherence",
        parameter: "sme.channels",
        description: "no decoherence, dephasing and damping at equal rate",
        default_agent: AgentKind::Controller,
        expand: decoherence_points,
    },
    Experiment {
        name: "initial-states",
        parameter: "episode.initial_state",
        description: "thermal, coherent, small-cat and even-thermal starts",
        default_agent: AgentKind::Drl,
        expand: initial_state_points,
    },
    Experiment {
        name: "feedback-operators",
        parameter: "system.feedback",
        description: "candidate feedback generators",
        default_agent: AgentKind::Controller,
        expand: feedback_points,
    },
    Experiment {
        name: "bayesian-table",
        parameter: "method",
        description: "Bayesian feedback from the conditional mean, the current and an ensemble",
        default_agent: AgentKind::Controller,
        expand: bayesian_points,
    },
    Experiment {
        name: "markovian-purity",
        parameter: "sme.measurement.gamma_meas",
        description: "steady-state purity and fidelity under direct current feedback",
        default_agent: AgentKind::Controller,
        expand: markovian_points,
    },
];

pub fn names() -> Vec<&'static str> {
    REGISTRY.iter().map(|e| e.name).collect()
}

pub fn lookup(name: &str) -> Result<&'static Experiment> {
    REGISTRY
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| BenchError::UnknownExperiment {
            name: name.to_string(),
            available: names().join(", "),
        })
}

fn point(label: impl Into<String>, config: RunConfig, runner: Runner) -> Point {
    Point {
        label: label.into(),
        config,
        runner,
    }
}

fn gamma_points(base: &RunConfig, runner: Runner) -> Vec<Point> {
    GAMMA_GRID
        .iter()
        .map(|&g| {
            let mut c = base.clone();
            c.sme.measurement.gamma_meas = g;
            point(g.to_string(), c, runner)
        })
        .collect()
}

fn eta_points(base: &RunConfig, runner: Runner) -> Vec<Point> {
    ETA_GRID
        .iter()
        .map(|&eta| {
            let mut c = base.clone();
            c.sme.measurement.eta = eta;
            point(eta.to_string(), c, runner)
        })
        .collect()
}

fn decoherence_points(base: &RunConfig, runner: Runner) -> Vec<Point> {
    [DecoherenceKind::None, DecoherenceKind::Dephasing, DecoherenceKind::Damping]
        .into_iter()
        .map(|kind| {
            let mut c = base.clone();
            c.sme.channels = match kind {
                DecoherenceKind::None => Vec::new(),
                kind => vec![DecoherenceChannel {
                    kind,
                    rate: DECOHERENCE_RATE,
                }],
            };
            let label = match kind {
                DecoherenceKind::None => "none",
                DecoherenceKind::Dephasing => "dephasing",
                DecoherenceKind::Damping => "damping",
            };
            point(label, c, runner)
        })
        .collect()
}

fn initial_state_points(base: &RunConfig, runner: Runner) -> Vec<Point> {
    [
        InitialStateSpec::Thermal { nbar: 1.0 },
        InitialStateSpec::Coherent { alpha: 3.0 },
        InitialStateSpec::SmallCat { alpha: 1.0 },
        InitialStateSpec::EvenThermal { nbar: 1.0 },
    ]
    .into_iter()
    .map(|spec| {
        let mut c = base.clone();
        c.episode.initial_state = spec;
        point(spec.name(), c, runner)
    })
    .collect()
}

fn feedback_points(base: &RunConfig, runner: Runner) -> Vec<Point> {
    FeedbackKind::ALL
        .into_iter()
        .map(|kind| {
            let mut c = base.clone();
            c.system.feedback = kind;
            point(kind.name(), c, runner)
        })
        .collect()
}

fn bayesian_points(base: &RunConfig, _runner: Runner) -> Vec<Point> {
    let with = |source| {
        let mut c = base.clone();
        c.controller = ControllerSpec::Bayesian { source };
        c
    };
    let mut points = vec![
        point(
            "bayesian-conditional-mean",
            with(EstimateSource::ConditionalMean),
            Runner::Agent(AgentKind::Controller),
        ),
        point("bayesian-current", with(EstimateSource::Current), Runner::Agent(AgentKind::Controller)),
    ];
    if base.ensemble.copies > 0 {
        let mut c = base.clone();
        c.controller = ControllerSpec::Bayesian {
            source: base.ensemble.source,
        };
        let label = match base.ensemble.source {
            EstimateSource::ConditionalMean => "ensemble-conditional-mean",
            EstimateSource::Current => "ensemble-current",
        };
        points.push(point(label, c, Runner::Ensemble));
    }
    if base.experiment.include_drl {
        points.push(point("drl", base.clone(), Runner::Agent(AgentKind::Drl)));
    }
    points
}

fn markovian_points(base: &RunConfig, _runner: Runner) -> Vec<Point> {
    MARKOVIAN_GAMMA_GRID
        .iter()
        .map(|&g| {
            let mut c = base.clone();
            c.sme.measurement.gamma_meas = g;
            point(g.to_string(), c, Runner::Markovian)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub dir: PathBuf,
    pub tidy: Vec<TidyRow>,
    pub summary: Vec<SummaryRow>,
}

/// Runs every point of experiment `name` into `out`. A failing point is
/// logged and skipped; the remaining points still run, then the tables and a
/// `FAILED` marker are written and an error returned.
pub fn run_experiment(
    name: &str,
    base: &RunConfig,
    out: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<ExperimentReport> {
    let experiment = lookup(name)?;
    base.validate()?;
    let points = experiment.points(base);
    std::fs::create_dir_all(out.join("manifests")).map_err(io_error(out))?;
    RunManifest::new(format!("experiment {name}"), base).write(out.join("manifest.toml"))?;

    let mut tidy = Vec::new();
    let mut incidents = Vec::new();
    for p in &points {
        let manifest = RunManifest::new(format!("experiment {name} {}={}", experiment.parameter, p.label), &p.config);
        let hash = manifest.hash();
        manifest.write(out.join("manifests").join(format!("{hash}.toml")))?;
        let replicates = if p.runner == Runner::Markovian {
            1
        } else {
            base.experiment.replicates
        };
        for k in 0..replicates {
            progress(&format!("{name}: {}={} replicate {k}", experiment.parameter, p.label));
            let ctx = RowContext {
                experiment: name,
                parameter: experiment.parameter,
                value: &p.label,
                replicate: k,
                manifest: &hash,
            };
            match run_point(p, k, out, &ctx) {
                Ok(rows) => tidy.extend(rows),
                Err(e) => {
                    let line = format!("{}={} replicate {k}: {e}", experiment.parameter, p.label);
                    progress(&format!("{name}: FAILED {line}"));
                    incidents.push(line);
                }
            }
        }
    }

    let summary = summarize(&tidy);
    write_csv(out.join("tidy.csv"), &tidy)?;
    write_csv(out.join("summary.csv"), &summary)?;
    let marker = out.join("FAILED");
    if incidents.is_empty() {
        if marker.exists() {
            std::fs::remove_file(&marker).map_err(io_error(&marker))?;
        }
        Ok(ExperimentReport {
            dir: out.to_path_buf(),
            tidy,
            summary,
        })
    } else {
        let mut log = incidents.join("\n");
        log.push('\n');
        std::fs::write(&marker, log).map_err(io_error(&marker))?;
        Err(BenchError::ExperimentFailed {
            name: name.to_string(),
            failures: incidents.len(),
            marker,
        })
    }
}

struct RowContext<'a> {
    experiment: &'a str,
    parameter: &'a str,
    value: &'a str,
    replicate: usize,
    manifest: &'a str,
}

impl RowContext<'_> {
    fn row(&self, episode: usize, seed: u64, metric: &str, measure: f64) -> TidyRow {
        TidyRow {
            experiment: self.experiment.to_string(),
            parameter: self.parameter.to_string(),
            value: self.value.to_string(),
            replicate: self.replicate,
            episode,
            seed,
            metric: metric.to_string(),
            measure,
            manifest: self.manifest.to_string(),
        }
    }

    fn episode_rows(&self, rows: &[EpisodeRow]) -> Vec<TidyRow> {
        rows.iter()
            .flat_map(|r| r.metrics().map(|(metric, v)| self.row(r.episode, r.seed, metric, v)))
            .collect()
    }
}

fn run_point(p: &Point, k: usize, out: &Path, ctx: &RowContext) -> Result<Vec<TidyRow>> {
    let cfg = &p.config;
    let system = Arc::new(cfg.build_system()?);
    let seed = replicate_seed(cfg.seed, k);
    match p.runner {
        Runner::Agent(AgentKind::Controller) => {
            let seeds = eval_seeds(seed, cfg.evaluation.episodes);
            let records = controller_episodes(cfg, &system, &seeds)?;
            let rows: Vec<EpisodeRow> = records
                .iter()
                .zip(&seeds)
                .enumerate()
                .map(|(e, (r, &s))| EpisodeRow::from_record(e, s, r, ctx.manifest))
                .collect();
            Ok(ctx.episode_rows(&rows))
        }
        Runner::Agent(AgentKind::Drl) => {
            let dir = out.join("training");
            std::fs::create_dir_all(&dir).map_err(io_error(&dir))?;
            let metrics_path = dir.join(format!("{}_r{k}.csv", p.label));
            if metrics_path.exists() {
                std::fs::remove_file(&metrics_path).map_err(io_error(&metrics_path))?;
            }
            let mut metrics = MetricsWriter::open(&metrics_path)?;
            let (trainer, _) = train_policy(cfg, &system, seed, Some(&mut metrics), None)?;
            // Evaluation seeds are shared by every replicate and point.
            let seeds = eval_seeds(cfg.seed, cfg.evaluation.episodes);
            let records = policy_episodes(cfg, &system, trainer.network(), &seeds)?;
            let rows: Vec<EpisodeRow> = records
                .iter()
                .zip(&seeds)
                .enumerate()
                .map(|(e, (r, &s))| EpisodeRow::from_record(e, s, r, ctx.manifest))
                .collect();
            Ok(ctx.episode_rows(&rows))
        }
        Runner::Ensemble => {
            let source = match cfg.controller {
                ControllerSpec::Bayesian { source } => source,
                _ => cfg.ensemble.source,
            };
            let sme = cfg.sme_for(&system);
            let rho0 = cfg.episode.initial_state.build(&system)?;
            let run_seed = eval_seeds(seed, 1)[0];
            let stats = ensemble_bayesian_run(
                cfg.ensemble.copies,
                &system,
                &sme,
                &rho0,
                cfg.episode.steps_per_episode,
                source,
                &cfg.observation_options(),
                run_seed,
            )?;
            let f = &stats.mean_fidelity;
            Ok(vec![
                ctx.row(0, run_seed, "mean_fidelity", stats.episode_mean_fidelity()),
                ctx.row(0, run_seed, "max_fidelity", f.iter().cloned().fold(f64::NEG_INFINITY, f64::max)),
                ctx.row(0, run_seed, "final_fidelity", f.last().copied().unwrap_or(f64::NAN)),
            ])
        }
        Runner::Markovian => {
            let ss = markovian_steady_state(&system, cfg.experiment.markovian_gain, cfg.sme.measurement.gamma_meas)?;
            Ok(vec![
                ctx.row(0, cfg.seed, "purity", ss.purity),
                ctx.row(0, cfg.seed, "fidelity", ss.fidelity),
                ctx.row(0, cfg.seed, "expect_x2", ss.expect_x2),
            ])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Scale;

    #[test]
    fn unknown_name_lists_registry() {
        let err = lookup("gamma").err().expect("unregistered");
        let text = err.to_string();
        for name in names() {
            assert!(text.contains(name), "{text}");
        }
    }

    #[test]
    fn points_are_valid_configs() {
        let base = RunConfig::preset(Scale::Desk);
        for e in &REGISTRY {
            let points = e.points(&base);
            assert!(!points.is_empty(), "{}", e.name);
            for p in &points {
                p.config.validate().unwrap();
            }
            let labels: Vec<&str> = points.iter().map(|p| p.label.as_str()).collect();
            let mut unique = labels.clone();
            unique.sort();
            unique.dedup();
            assert_eq!(unique.len(), labels.len(), "{}", e.name);
        }
    }

    #[test]
    fn agent_override_switches_runner() {
        let mut base = RunConfig::preset(Scale::Desk);
        let e = lookup("gamma-sweep").unwrap();
        assert_eq!(e.points(&base)[0].runner, Runner::Agent(AgentKind::Drl));
        base.experiment.agent = Some(AgentKind::Controller);
        assert_eq!(e.points(&base)[0].runner, Runner::Agent(AgentKind::Controller));
    }
}
