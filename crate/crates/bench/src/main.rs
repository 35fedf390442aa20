use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use doublewell_bench::commands::{self, StateChoice};
use doublewell_bench::{RunConfig, Scale};
use doublewell_core::control::EstimateSource;

#[derive(Parser)]
#[command(name = "doublewell", version, about = "Measurement-feedback control of a quantum double well")]
struct Cli {
    /// TOML file layered over the scale preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (at most 2^63 - 1).
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(0..=i64::MAX as u64))]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Scale::Desk)]
    scale: Scale,
    /// Override one config value, e.g. `--set sme.measurement.gamma_meas=0.3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    ConditionalMean,
    Current,
}

#[derive(Subcommand)]
enum Command {
    /// Lowest eigenpairs of the double-well Hamiltonian.
    GroundState {
        #[arg(long, default_value_t = 6)]
        levels: usize,
    },
    /// Wigner field on a square grid.
    Wigner {
        #[arg(long, value_enum, default_value_t = StateChoice::Ground)]
        state: StateChoice,
        #[arg(long, default_value_t = 141)]
        points: usize,
    },
    /// Classical flow of each feedback generator.
    Streamlines {
        #[arg(long, default_value_t = 41)]
        points: usize,
    },
    /// One trajectory under the configured controller.
    Evolve,
    /// Bayesian feedback episodes.
    Bayesian {
        #[arg(long, value_enum)]
        source: Option<Source>,
    },
    /// Lockstep ensemble under one shared Bayesian amplitude.
    Ensemble,
    /// Steady states of direct current feedback against the measurement rate.
    Markovian {
        #[arg(long, value_delimiter = ',')]
        gammas: Vec<f64>,
    },
    /// Train a PPO policy.
    Train {
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run a registered experiment.
    Experiment { name: String },
}

fn run(cli: Cli) -> doublewell_bench::Result<()> {
    let mut overrides = cli.overrides;
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = RunConfig::load(cli.scale, cli.config.as_deref(), &overrides)?;
    let out = cli.out.as_path();
    match cli.command {
        Command::GroundState { levels } => {
            let pairs = commands::ground_state(&cfg, out, levels)?;
            println!("ground parity {:+.12}", commands::ground_parity(&cfg)?);
            for (k, e) in pairs.iter().enumerate() {
                let parity = e.parity.map_or("mixed", |p| p.label());
                println!("E{k} = {:.12} ({parity})", e.energy);
            }
        }
        Command::Wigner { state, points } => {
            let integral = commands::wigner_field(&cfg, out, state, points)?;
            println!("wigner integral {integral:.6}");
        }
        Command::Streamlines { points } => {
            for path in commands::streamlines(&cfg, out, points)? {
                println!("{}", path.display());
            }
        }
        Command::Evolve => {
            let record = commands::evolve(&cfg, out)?;
            println!("mean fidelity {:.4}", record.mean_fidelity());
        }
        Command::Bayesian { source } => {
            let source = source.map(|s| match s {
                Source::ConditionalMean => EstimateSource::ConditionalMean,
                Source::Current => EstimateSource::Current,
            });
            let rows = commands::bayesian(&cfg, out, source)?;
            let mean = rows.iter().map(|r| r.mean_fidelity).sum::<f64>() / rows.len() as f64;
            println!("{} episodes, mean fidelity {mean:.4}", rows.len());
        }
        Command::Ensemble => {
            println!("ensemble mean fidelity {:.4}", commands::ensemble(&cfg, out)?);
        }
        Command::Markovian { gammas } => {
            for s in commands::markovian(&cfg, out, &gammas)? {
                println!("gamma {} purity {:.4} fidelity {:.4}", s.gamma_meas, s.purity, s.fidelity);
            }
        }
        Command::Train { resume } => {
            let ckpt = commands::train(&cfg, out, resume.as_deref())?;
            println!("iteration {} after {} steps", ckpt.iteration, ckpt.env_steps);
        }
        Command::Eval { checkpoint } => {
            let rows = commands::eval(&cfg, out, &checkpoint)?;
            let mean = rows.iter().map(|r| r.mean_fidelity).sum::<f64>() / rows.len() as f64;
            println!("{} episodes, mean fidelity {mean:.4}", rows.len());
        }
        Command::Experiment { name } => {
            let report = commands::experiment(&cfg, out, &name, &mut |line| eprintln!("{line}"))?;
            for s in report.summary.iter().filter(|s| s.metric == "mean_fidelity" || s.metric == "purity") {
                println!("{}={} {} mean {:.4} max {:.4}", s.parameter, s.value, s.metric, s.mean, s.max);
            }
            println!("wrote {}", report.dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
