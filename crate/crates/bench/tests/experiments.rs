use std::path::Path;

use doublewell_bench::commands;
use doublewell_bench::dataset::{read_csv, summarize, SummaryRow, TidyRow};
use doublewell_bench::figures::{emit_figure_data, FigureKind, FigureSource};
use doublewell_bench::{run_experiment, BenchError, RunConfig, RunManifest, Scale};
use proptest::prelude::*;

fn tiny(overrides: &[&str]) -> RunConfig {
    let mut all = vec![
        "evaluation.episodes=2",
        "experiment.replicates=2",
        "episode.steps_per_episode=50",
        "ppo.horizon=50",
        "ppo.n_envs=2",
        "ppo.minibatch=50",
        "training.iterations=2",
        "training.shared=16",
        "training.actor=[16]",
        "training.critic=[16]",
        "ensemble.copies=3",
    ];
    all.extend_from_slice(overrides);
    let owned: Vec<String> = all.iter().map(|s| s.to_string()).collect();
    RunConfig::load(Scale::Desk, None, &owned).unwrap()
}

fn assert_summary_matches(tidy: &[TidyRow], summary: &[SummaryRow]) {
    let recomputed = summarize(tidy);
    assert_eq!(recomputed.len(), summary.len());
    for (a, b) in recomputed.iter().zip(summary) {
        assert_eq!((&a.value, &a.metric, a.count), (&b.value, &b.metric, b.count));
        for (x, y) in [
            (a.mean, b.mean),
            (a.max, b.max),
            (a.min, b.min),
            (a.replicate_mean_min, b.replicate_mean_min),
            (a.replicate_mean_max, b.replicate_mean_max),
        ] {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }
}

#[test]
fn controller_experiment_tables_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("decoherence");
    let report = run_experiment("decoherence", &tiny(&[]), &out, &mut |_| {}).unwrap();

    let tidy: Vec<TidyRow> = read_csv(out.join("tidy.csv")).unwrap();
    let summary: Vec<SummaryRow> = read_csv(out.join("summary.csv")).unwrap();
    assert_eq!(tidy.len(), report.tidy.len());
    assert_summary_matches(&tidy, &summary);

    let values: Vec<&str> = summary.iter().map(|s| s.value.as_str()).collect();
    for v in ["none", "dephasing", "damping"] {
        assert!(values.contains(&v), "{values:?}");
    }
    for row in &tidy {
        let path = out.join("manifests").join(format!("{}.toml", row.manifest));
        let manifest = RunManifest::read(&path).unwrap();
        assert_eq!(manifest.hash(), row.manifest);
    }
    assert!(out.join("manifest.toml").exists());
    assert!(!out.join("FAILED").exists());
}

#[test]
fn failing_points_leave_a_marker_and_stale_markers_are_cleared() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("decoherence");
    let unstable = tiny(&["sme.integrator=\"euler-maruyama\"", "sme.n_substeps=1"]);
    let err = run_experiment("decoherence", &unstable, &out, &mut |_| {}).unwrap_err();
    assert!(matches!(err, BenchError::ExperimentFailed { failures: 6, .. }), "{err}");
    let marker = std::fs::read_to_string(out.join("FAILED")).unwrap();
    assert_eq!(marker.lines().count(), 6);
    assert!(marker.contains("positivity"), "{marker}");
    assert!(out.join("summary.csv").exists());

    run_experiment("decoherence", &tiny(&[]), &out, &mut |_| {}).unwrap();
    assert!(!out.join("FAILED").exists());
}

#[test]
fn markovian_experiment_runs_once_per_gain_point() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment("markovian-purity", &tiny(&[]), &dir.path().join("m"), &mut |_| {}).unwrap();
    let purity: Vec<&SummaryRow> = report.summary.iter().filter(|s| s.metric == "purity").collect();
    assert_eq!(purity.len(), 7);
    assert!(purity.iter().all(|s| s.count == 1 && s.mean > 0.0 && s.mean <= 1.0 + 1e-12));
}

#[test]
fn training_curve_has_increasing_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&["training.iterations=3"]);
    commands::train(&cfg, dir.path(), None).unwrap();
    let curve = csv::Reader::from_path(dir.path().join("training_curve.csv")).unwrap().into_records();
    let iterations: Vec<usize> = curve.map(|r| r.unwrap()[0].parse().unwrap()).collect();
    assert_eq!(iterations, vec![1, 2, 3]);
}

#[test]
fn resumed_training_appends_to_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&[]);
    commands::train(&cfg, dir.path(), None).unwrap();
    let ckpt = dir.path().join("checkpoint.bin");
    let resumed = commands::train(&cfg, dir.path(), Some(&ckpt)).unwrap();
    assert_eq!(resumed.iteration, 4);
    let rows = csv::Reader::from_path(dir.path().join("metrics.csv")).unwrap().records().count();
    assert_eq!(rows, 4);
}

#[test]
fn desk_checkpoint_evaluates_at_full_dimension() {
    let dir = tempfile::tempdir().unwrap();
    commands::train(&tiny(&[]), dir.path(), None).unwrap();
    let full = tiny(&["system.dim=60", "sme.n_substeps=20", "evaluation.episodes=1"]);
    let rows = commands::eval(&full, &dir.path().join("eval"), &dir.path().join("checkpoint.bin")).unwrap();
    assert_eq!(rows.len(), 1);
    assert!((0.0..=1.0 + 1e-9).contains(&rows[0].mean_fidelity));
}

#[test]
fn ground_state_wigner_integrates_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let integral = commands::wigner_field(&tiny(&[]), dir.path(), commands::StateChoice::Ground, 121).unwrap();
    assert!((0.99..=1.01).contains(&integral), "{integral}");
    let header = std::fs::read_to_string(dir.path().join("wigner.csv")).unwrap();
    assert!(header.starts_with("x,p,W\n"));
}

#[test]
fn missing_sources_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.csv");
    for (kind, source) in [
        (FigureKind::TrainingCurve, FigureSource::MetricsFile(missing.clone())),
        (FigureKind::FidelityTrace, FigureSource::TrajectoryFile(missing.clone())),
    ] {
        let err = emit_figure_data(kind, &source, dir.path().join("out.csv")).unwrap_err();
        assert!(matches!(&err, BenchError::MissingSource(p) if p == &missing), "{err}");
    }
    let err = emit_figure_data(FigureKind::Wigner, &FigureSource::MetricsFile(missing), Path::new("x.csv")).unwrap_err();
    assert!(matches!(err, BenchError::FigureSource { .. }), "{err}");
}

#[test]
fn manifest_hash_tracks_the_config() {
    let base = tiny(&[]);
    let same = RunManifest::new("a", &base);
    let mut later = RunManifest::new("a", &base);
    later.timestamp += 100;
    assert_eq!(same.hash(), later.hash());
    let changed = base.with_override("seed", toml::Value::Integer(5)).unwrap();
    assert_ne!(same.hash(), RunManifest::new("a", &changed).hash());
}

fn tidy_row(value: u8, replicate: usize, metric: bool, measure: f64) -> TidyRow {
    TidyRow {
        experiment: "e".into(),
        parameter: "p".into(),
        value: value.to_string(),
        replicate,
        episode: 0,
        seed: 0,
        metric: if metric { "a" } else { "b" }.into(),
        measure,
        manifest: format!("m{value}"),
    }
}

proptest! {
    #[test]
    fn summary_statistics_bound_their_groups(
        rows in prop::collection::vec((0u8..4, 0usize..3, any::<bool>(), -10.0f64..10.0), 1..60)
    ) {
        let tidy: Vec<TidyRow> = rows.iter().map(|&(v, r, m, x)| tidy_row(v, r, m, x)).collect();
        let summary = summarize(&tidy);
        prop_assert_eq!(summary.iter().map(|s| s.count).sum::<usize>(), tidy.len());
        for s in &summary {
            prop_assert!(s.min <= s.mean + 1e-12 && s.mean <= s.max + 1e-12);
            prop_assert!(s.min <= s.replicate_mean_min + 1e-12);
            prop_assert!(s.replicate_mean_min <= s.replicate_mean_max);
            prop_assert!(s.replicate_mean_max <= s.max + 1e-12);
            prop_assert_eq!(&s.manifest, &format!("m{}", s.value));
        }
    }
}
