use ssl_lab::checkpoint;
use ssl_lab::data::synth::ClassCount;
use ssl_lab::data::{generate, DatasetSpec, Split};
use ssl_lab::eval::{self, compare, EvalError, MetricsReport};
use ssl_lab::train::{self, RunRecord, TrainConfig, TrainMode};

fn tiny_run(mode: TrainMode) -> (train::Trained, ssl_lab::data::Dataset) {
    let src = generate(&DatasetSpec {
        num_distinct_classes: 3,
        confusable_cluster_size: 2,
        anatomical_count: ClassCount { train: 8, test: 5 },
        background_count: ClassCount { train: 10, test: 6 },
        image_size: (16, 16),
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainConfig { mode, epochs: Some(2), batch_size: 8, labelled_per_class: 3, eval_every: 0, ..Default::default() };
    (train::run(&cfg, &src, &mut |_| {}).unwrap(), src)
}

fn with_accuracy(base: &RunRecord, mode: TrainMode, overall: f64, grouped: f64) -> RunRecord {
    let mut r = base.clone();
    r.config.mode = mode;
    let m = r.final_metrics.as_mut().unwrap();
    m.overall_accuracy_anatomical = overall;
    m.grouped_cluster_accuracy = grouped;
    r
}

#[test]
fn export_round_trips_through_the_summary() {
    let (t, _) = tiny_run(TrainMode::Supervised);
    let report = t.record.final_metrics.clone().unwrap();
    let dir = tempfile::tempdir().unwrap();
    eval::export(&report, Some(&serde_json::json!({"note": "x"})), dir.path()).unwrap();
    assert_eq!(eval::read_summary(&dir.path().join("summary.json")).unwrap(), report);

    let csv = std::fs::read_to_string(dir.path().join("confusion.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), format!("true\\pred,{}", report.class_names.join(",")));
    for (line, expected) in lines.zip(report.row_sums()) {
        let total: u64 = line.split(',').skip(1).map(|v| v.parse::<u64>().unwrap()).sum();
        assert_eq!(total, expected);
    }
    let svg = std::fs::read_to_string(dir.path().join("confusion.svg")).unwrap();
    let c = report.class_names.len();
    assert_eq!(svg.matches(r#"class="cell""#).count(), c * c);
    assert!(svg.trim_end().ends_with("</svg>"));
    assert!(dir.path().join("accuracy_bars.svg").is_file());
}

#[test]
fn checkpoint_evaluation_reproduces_the_logged_metrics() {
    let (t, src) = tiny_run(TrainMode::Ssl);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&t.params, &path).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    assert_eq!(loaded.tensors(), t.params.tensors());
    let again = eval::evaluate(&loaded, &src.split(Split::Test)).unwrap();
    assert_eq!(Some(again), t.record.final_metrics);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&path, &bytes).unwrap();
    assert!(checkpoint::load(&path).is_err());
}

#[test]
fn evaluation_rejects_mismatched_class_counts() {
    let (t, src) = tiny_run(TrainMode::Supervised);
    let test = src.without_background().split(Split::Test);
    assert!(matches!(eval::evaluate(&t.params, &test), Err(EvalError::ClassMismatch { model: 6, data: 5 })));
}

#[test]
fn comparison_of_identical_records_has_zero_delta() {
    let (t, _) = tiny_run(TrainMode::Supervised);
    let sup = t.record;
    let ssl = with_accuracy(&sup, TrainMode::Ssl, sup.final_metrics.as_ref().unwrap().overall_accuracy_anatomical, sup.final_metrics.as_ref().unwrap().grouped_cluster_accuracy);
    let c = compare(&[sup, ssl]).unwrap();
    assert_eq!(c.rows.len(), 1);
    assert_eq!(c.rows[0].delta_overall, 0.0);
    assert_eq!(c.rows[0].delta_grouped, 0.0);
    assert!(!c.rows[0].detrimental);
}

#[test]
fn comparison_reports_signed_mean_deltas() {
    let (t, _) = tiny_run(TrainMode::Supervised);
    let records = vec![
        with_accuracy(&t.record, TrainMode::Supervised, 0.700, 0.900),
        with_accuracy(&t.record, TrainMode::Supervised, 0.740, 0.920),
        with_accuracy(&t.record, TrainMode::Ssl, 0.754, 0.930),
    ];
    let c = compare(&records).unwrap();
    let row = &c.rows[0];
    assert_eq!((row.supervised_runs, row.ssl_runs), (2, 1));
    assert!((row.delta_overall - 0.034).abs() < 1e-12);
    assert!((row.delta_grouped - 0.020).abs() < 1e-12);
    assert!(c.to_csv().lines().nth(1).unwrap().contains(",+0.0340,"));

    let worse = compare(&[records[0].clone(), with_accuracy(&t.record, TrainMode::Ssl, 0.650, 0.9)]).unwrap();
    assert!(worse.rows[0].detrimental);
    assert!(worse.to_table().contains(" !"));
}

#[test]
fn comparison_refuses_records_from_different_test_sets() {
    let (t, _) = tiny_run(TrainMode::Supervised);
    let mut other = with_accuracy(&t.record, TrainMode::Ssl, 0.5, 0.5);
    other.test_set_hash = "0".repeat(64);
    assert!(matches!(compare(&[t.record.clone(), other]), Err(EvalError::HashMismatch(..))));
    assert!(matches!(compare(&[t.record]), Err(EvalError::TooFewRecords(1))));
}

#[test]
fn failed_runs_are_skipped_and_orphans_listed() {
    let (t, _) = tiny_run(TrainMode::Supervised);
    let mut failed = with_accuracy(&t.record, TrainMode::Supervised, 0.1, 0.1);
    failed.final_metrics = None;
    failed.failed = Some("diverged".into());
    let mut orphan = with_accuracy(&t.record, TrainMode::Ssl, 0.5, 0.5);
    orphan.config.labelled_per_class = 50;
    let c = compare(&[failed, orphan]).unwrap();
    assert!(c.rows.is_empty());
    assert_eq!(c.unmatched.len(), 1);
}

#[test]
fn background_rows_do_not_count_toward_accuracy() {
    let names: Vec<String> = ["a", "b", "c", "bg"].iter().map(|s| s.to_string()).collect();
    let pairs = [(0, 0), (1, 2), (2, 1), (3, 0), (3, 0)];
    let r = MetricsReport::from_predictions(names, pairs, &[1, 2], Some(3));
    assert_eq!(r.overall_accuracy_anatomical, 1.0 / 3.0);
    assert_eq!(r.grouped_cluster_accuracy, 1.0);
    assert_eq!(r.row_sums(), vec![1, 1, 1, 2]);
    assert_eq!(r.per_class_recall[3], Some(0.0));
}
