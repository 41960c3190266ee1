use specmoment_bench::dataset::TokenMode;
use specmoment_bench::{preset, run_experiment, Estimator, ExperimentConfig, Scenario};
use specmoment_core::{FitConfig, TripletMode};

fn quick_fit() -> FitConfig {
    FitConfig { n_random_restarts: 1, outer_max_iters: 2, alt_max_iters: 20, ..Default::default() }
}

fn small_ring() -> ExperimentConfig {
    ExperimentConfig {
        n_replicates: 2,
        n_test_sequences: 20,
        fit: quick_fit(),
        ..preset("ring", 7).unwrap()
    }
}

#[test]
fn string_table_reproduces_the_spectral_column() {
    let report = run_experiment(&preset("string", 0).unwrap()).unwrap();
    let b0 = |i: usize, e: Estimator| report.settings[i].cell(e).unwrap().b0.as_ref().unwrap().mean;
    // published spectral column
    for (i, expected, tol) in [(0, 1.0, 1e-6), (1, 0.8889, 1e-4), (2, 0.0198, 1e-4), (3, 0.0008, 1e-4)] {
        assert!((b0(i, Estimator::Spec) - expected).abs() < tol, "row {i}: {}", b0(i, Estimator::Spec));
    }
    assert!((b0(0, Estimator::M) - 1.0).abs() < 1e-6);
    assert!(b0(3, Estimator::M) < b0(2, Estimator::M));
    assert_eq!(report.checks.len(), 2);
    assert!(report.checks.iter().all(|c| c.passed), "{:?}", report.checks);
    let table = report.wide_csv().unwrap();
    assert!(table.starts_with("length,spec,m\n10,"));
    assert_eq!(table.lines().count(), 5);
}

#[test]
fn ring_table_shape_and_determinism() {
    let cfg = small_ring();
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.wide_csv().unwrap(), b.wide_csv().unwrap());
    assert_eq!(a.long_csv().unwrap(), b.long_csv().unwrap());
    assert_eq!(a.settings, b.settings);
    let table = a.wide_csv().unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "rank,spec,m,m_regularized");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("4,") && lines[3].starts_with("2,"));
    for s in &a.settings {
        for c in &s.cells {
            assert_eq!(c.n_ok + c.n_failed, 2);
            assert_eq!(c.replicates.len(), 2);
            let stat = c.relnorm.as_ref().unwrap();
            assert_eq!(stat.n, c.n_ok);
            assert!(stat.se.is_some());
            assert_eq!(c.included_sequences + c.excluded_sequences, 20 * c.n_ok);
        }
    }
    let other = run_experiment(&ExperimentConfig { seed: 8, ..cfg }).unwrap();
    assert_ne!(other.settings, a.settings);
}

#[test]
fn reports_are_written_to_disk() {
    let cfg = ExperimentConfig { n_replicates: 1, scenario: Scenario::Ring { ranks: vec![3] }, ..small_ring() };
    let report = run_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = report.write_to(dir.path()).unwrap();
    assert_eq!(paths.len(), 3);
    let json = std::fs::read_to_string(dir.path().join("ring_report.json")).unwrap();
    let back: specmoment_bench::ExperimentReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back.settings, report.settings);
    assert_eq!(back.config, cfg);
    assert!(back.settings[0].cells[0].relnorm.as_ref().unwrap().se.is_none());
    let long = std::fs::read_to_string(dir.path().join("ring_long.csv")).unwrap();
    assert!(long.starts_with("setting,value,rank,n_train,estimator,metric,mean,se"));
}

#[test]
fn dataset_file_scenario_reports_prediction_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.txt");
    let line: String = "abc".repeat(67);
    std::fs::write(&path, format!("{line}\n")).unwrap();
    let cfg = ExperimentConfig {
        name: "corpus".into(),
        scenario: Scenario::DatasetFile {
            path: path.clone(),
            alphabet: None,
            token_mode: TokenMode::Character,
            train_fraction: 0.8,
            rank: 3,
        },
        n_train: 1,
        triplet_mode: TripletMode::Sliding,
        n_test_sequences: 1,
        test_sequence_length: 1,
        estimators: vec![Estimator::Spec, Estimator::M],
        lambda_regularized: 1e-5,
        fit: quick_fit(),
        seed: 1,
        n_replicates: 1,
    };
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.primary_metric, "prederr");
    let setting = &report.settings[0];
    assert_eq!(setting.n_train, 158);
    for c in &setting.cells {
        assert_eq!(c.n_ok, 1, "{:?}", c.replicates[0].error);
        assert!(c.relnorm.is_none());
        let p = c.prederr.as_ref().unwrap().mean;
        assert!((0.0..=1.0).contains(&p));
    }
    // a three-cycle is captured exactly at rank 3
    assert!(setting.cell(Estimator::Spec).unwrap().prederr.as_ref().unwrap().mean < 0.05);
}

#[test]
fn synthetic_scenario_draws_a_model_per_replicate() {
    let cfg = ExperimentConfig {
        scenario: Scenario::SyntheticHmm {
            n_hidden: 2,
            n_obs: 3,
            train_sizes: vec![200],
            concentration: 1.0,
            rank: None,
        },
        n_replicates: 2,
        n_test_sequences: 10,
        fit: quick_fit(),
        ..preset("synthetic", 3).unwrap()
    };
    let report = run_experiment(&cfg).unwrap();
    let cell = &report.settings[0].cells[0];
    assert_eq!(report.settings[0].rank, 2);
    assert!(cell.prederr.is_some() && cell.relnorm.is_some());
    assert_ne!(cell.replicates[0].relnorm, cell.replicates[1].relnorm);
}

#[test]
fn failed_cells_are_recorded_not_fatal() {
    // rank above the alphabet size fails every fit
    let cfg = ExperimentConfig { scenario: Scenario::Ring { ranks: vec![6] }, n_replicates: 1, ..small_ring() };
    let report = run_experiment(&cfg).unwrap();
    for c in &report.settings[0].cells {
        assert_eq!((c.n_ok, c.n_failed), (0, 1));
        assert!(c.replicates[0].error.is_some());
    }
    assert!(report.long_csv().unwrap().contains(",failed,"));
}

#[test]
fn config_files_round_trip_and_reject_typos() {
    let cfg = small_ring();
    let text = cfg.to_toml().unwrap();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    let typo = text.replace("n_replicates", "n_replicate");
    assert!(ExperimentConfig::from_toml(&typo).is_err());
    let none = ExperimentConfig { estimators: vec![], ..cfg };
    assert!(none.validate().is_err());
}
