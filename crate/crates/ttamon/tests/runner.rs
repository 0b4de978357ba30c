use std::path::PathBuf;

use ttamon::config::{AdaptationConfig, ExperimentConfig};
use ttamon::output::{csv_path, read_csv_hash, read_rows, summary_path, verify_hashes};
use ttamon::presets;
use ttamon::runner::{compare_alarms, Experiment, RunError, RunSummary, StepRow};
use ttamon_core::losses::LossKind;
use ttamon_core::monitor::AlarmKind;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn short(mut config: ExperimentConfig, steps: usize) -> ExperimentConfig {
    config.schedule.steps = steps;
    config
}

#[test]
fn shipped_configs_match_presets() {
    for name in presets::NAMES {
        let path = configs_dir().join(format!("{name}.json"));
        let loaded = ExperimentConfig::load(&path).unwrap();
        assert_eq!(loaded, presets::by_name(name).unwrap(), "{name}");
    }
}

#[test]
fn unsupervised_outputs_ignore_test_labels() {
    let mut config = presets::severity_ramp(LossKind::ZeroOne);
    config.terminate_on_alarm = false;
    let exp = Experiment::new(config).unwrap();
    let classes = exp.config().source.classes;
    let collect = |corrupt: bool| {
        let mut rows: Vec<StepRow> = Vec::new();
        let summary = exp
            .run_rep_with(
                0,
                |b| {
                    if corrupt {
                        let labels = b.labels().iter().map(|y| (y + 1) % classes).collect();
                        b.with_labels(labels)
                    } else {
                        b
                    }
                },
                |r| {
                    rows.push(r.clone());
                    Ok(())
                },
            )
            .unwrap();
        (rows, summary)
    };
    let (clean, clean_summary) = collect(false);
    let (corrupted, corrupted_summary) = collect(true);
    assert_eq!(clean.len(), corrupted.len());
    for (a, b) in clean.iter().zip(&corrupted) {
        assert_eq!(a.l_b, b.l_b);
        assert_eq!(a.phi_b, b.phi_b);
        assert_eq!(a.quantile_bound, b.quantile_bound);
        assert_eq!(a.phi_tau, b.phi_tau);
        assert_eq!(a.l_c, b.l_c);
        assert_eq!(a.lambda_k, b.lambda_k);
        assert_eq!(a.collapsed_fraction, b.collapsed_fraction);
    }
    assert_ne!(
        clean.iter().map(|r| r.empirical_risk).collect::<Vec<_>>(),
        corrupted
            .iter()
            .map(|r| r.empirical_risk)
            .collect::<Vec<_>>()
    );
    assert_eq!(
        clean_summary.t_min(AlarmKind::Unsupervised),
        corrupted_summary.t_min(AlarmKind::Unsupervised)
    );
}

#[test]
fn run_to_dir_writes_consistent_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = short(presets::severity_ramp(LossKind::Brier), 30);
    config.repetitions = 3;
    let exp = Experiment::new(config).unwrap();
    let summary = exp.run_to_dir(dir.path(), false).unwrap();
    let text = std::fs::read_to_string(summary_path(dir.path(), "severity_ramp_brier")).unwrap();
    let parsed: RunSummary = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed, summary);
    assert_eq!(summary.repetitions.len(), 3);
    for rep in &summary.repetitions {
        let path = csv_path(dir.path(), &summary.name, rep.rep);
        assert_eq!(read_csv_hash(&path).unwrap().as_deref(), Some(exp.hash()));
        let rows = read_rows(&path).unwrap();
        assert_eq!(rows.len(), rep.steps);
        let in_memory = exp.run_rep(rep.rep).unwrap();
        assert_eq!(in_memory.summary, *rep);
        assert_eq!(rows.len(), in_memory.rows.len());
    }

    let first = csv_path(dir.path(), &summary.name, 0);
    let body = std::fs::read_to_string(&first).unwrap();
    std::fs::write(&first, body.replacen(exp.hash(), "0000", 1)).unwrap();
    assert!(matches!(
        verify_hashes(dir.path(), &summary),
        Err(RunError::HashMismatch { .. })
    ));
}

#[test]
fn parallel_and_sequential_runs_agree() {
    let mut config = short(presets::gradual_drift(LossKind::ZeroOne), 40);
    config.repetitions = 4;
    let exp = Experiment::new(config).unwrap();
    let all = exp.run_all().unwrap();
    for (rep, outcome) in all.iter().enumerate() {
        let single = exp.run_rep(rep).unwrap();
        assert_eq!(outcome.rows, single.rows);
        assert_eq!(outcome.summary.seed, exp.rep_seed(rep));
    }
}

#[test]
fn failing_sink_keeps_earlier_rows() {
    let exp = Experiment::new(short(presets::no_shift(LossKind::ZeroOne), 20)).unwrap();
    let mut seen = 0;
    let err = exp
        .run_rep_with(
            0,
            |b| b,
            |r| {
                seen += 1;
                if r.step == 6 {
                    return Err(RunError::Io(std::io::Error::other("disk full")));
                }
                Ok(())
            },
        )
        .unwrap_err();
    assert!(matches!(err, RunError::Io(_)));
    assert_eq!(seen, 6);
}

#[test]
fn compare_holds_on_the_ramp() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = presets::severity_ramp(LossKind::ZeroOne);
    config.repetitions = 2;
    let report = compare_alarms(&config, dir.path()).unwrap();
    assert!(report.rows_total > 0);
    assert!(report.rows_checked <= report.rows_total);

    config.diagnostics = false;
    assert!(matches!(
        compare_alarms(&config, dir.path()),
        Err(RunError::Config(_))
    ));
    config.diagnostics = true;
    config.alarms = vec![AlarmKind::Unsupervised];
    assert!(matches!(
        compare_alarms(&config, dir.path()),
        Err(RunError::Config(_))
    ));
}

#[test]
fn sudden_shift_is_flagged_sooner_without_adaptation() {
    let first_alarm = |adaptation: AdaptationConfig| -> Vec<u64> {
        let mut config = presets::sudden_severe(LossKind::ZeroOne);
        config.adaptation = adaptation;
        config.repetitions = 8;
        let steps = config.schedule.steps as u64;
        Experiment::new(config)
            .unwrap()
            .run_all()
            .unwrap()
            .iter()
            .map(|o| {
                o.summary
                    .t_min(AlarmKind::Unsupervised)
                    .unwrap_or(steps + 1)
            })
            .collect()
    };
    let frozen = first_alarm(AdaptationConfig::frozen());
    let adapted = first_alarm(AdaptationConfig::default());
    assert!(frozen.iter().all(|&t| t <= 10), "{frozen:?}");
    let mean = |v: &[u64]| v.iter().sum::<u64>() as f64 / v.len() as f64;
    assert!(mean(&frozen) <= mean(&adapted), "{frozen:?} {adapted:?}");
}

#[test]
fn no_shift_stays_quiet() {
    let mut config = presets::no_shift(LossKind::ZeroOne);
    config.repetitions = 4;
    for outcome in Experiment::new(config).unwrap().run_all().unwrap() {
        assert!(
            !outcome
                .summary
                .alarm(AlarmKind::Unsupervised)
                .unwrap()
                .fired
        );
        assert!(
            !outcome
                .summary
                .alarm(AlarmKind::SupervisedOracle)
                .unwrap()
                .fired
        );
        assert_eq!(outcome.rows.len(), 300);
    }
}
