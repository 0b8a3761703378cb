use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ssl_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssl-lab")).args(args).env_remove("SSL_LAB_SEED").output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_small(dir: &Path, seed: &str, extra: &[&str]) -> String {
    let mut args = vec![
        "gen-data", "--out", p(dir), "--seed", seed,
        "--train-per-class", "6", "--test-per-class", "3",
        "--background-train", "10", "--background-test", "4",
    ];
    args.extend_from_slice(extra);
    ok(&ssl_lab(&args))
}

fn manifest_hash(stdout: &str) -> String {
    stdout.lines().find_map(|l| l.strip_prefix("manifest sha256 ")).unwrap().to_string()
}

fn only_run(out: &Path) -> PathBuf {
    let mut dirs: Vec<_> = fs::read_dir(out.join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1);
    dirs.pop().unwrap()
}

fn train_small(data: &Path, out: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["train", "--data", p(data), "--out", p(out), "--quiet", "--labelled-per-class", "2", "--eval-every", "0"];
    if !extra.contains(&"--epochs") {
        args.extend(["--epochs", "1"]);
    }
    args.extend_from_slice(extra);
    ok(&ssl_lab(&args));
    only_run(out)
}

#[test]
fn gen_data_reports_counts_and_a_stable_manifest_hash() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out = gen_small(a.path(), "3", &[]);
    let rows: Vec<&str> = out.lines().skip(1).take_while(|l| !l.starts_with("wrote")).collect();
    assert_eq!(rows.len(), 14);
    assert!(rows[13].starts_with("background"));
    assert_eq!(manifest_hash(&out), manifest_hash(&gen_small(b.path(), "3", &[])));
    assert!(a.path().join("spec.json").is_file());

    let c = tempfile::tempdir().unwrap();
    let out = gen_small(c.path(), "3", &["--no-background"]);
    assert_eq!(out.lines().skip(1).take_while(|l| !l.starts_with("wrote")).count(), 13);
    assert_ne!(manifest_hash(&out), manifest_hash(&gen_small(b.path(), "4", &[])));
}

#[test]
fn malformed_config_is_a_config_error_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{\n  \"mode\": \"ssl\",\n  \"epochs\": ,\n}\n").unwrap();
    let out = ssl_lab(&["train", "--config", p(&cfg), "--data", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.json:3:13"), "{err}");

    fs::write(&cfg, r#"{"labelled_per_class": 0}"#).unwrap();
    assert_eq!(ssl_lab(&["train", "--config", p(&cfg), "--data", p(dir.path())]).status.code(), Some(2));
    assert_eq!(ssl_lab(&["grid", "--preset", "nope", "--data", p(dir.path())]).status.code(), Some(2));
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ssl_lab(&["train", "--data", p(&dir.path().join("absent")), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_then_evaluate_reproduces_the_summary() {
    let data = tempfile::tempdir().unwrap();
    gen_small(data.path(), "1", &[]);
    let out = tempfile::tempdir().unwrap();
    let run = train_small(data.path(), out.path(), &["--no-background"]);
    for f in ["record.json", "metrics.csv", "model.ckpt", "summary.json", "confusion.csv"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let eval_out = tempfile::tempdir().unwrap();
    let stdout = ok(&ssl_lab(&["evaluate", "--checkpoint", p(&run), "--data", p(data.path()), "--out", p(eval_out.path())]));
    assert!(stdout.starts_with("overall "));
    let strip = |path: PathBuf| {
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("run");
        v
    };
    assert_eq!(strip(run.join("summary.json")), strip(eval_out.path().join("summary.json")));
    assert_eq!(fs::read(run.join("confusion.csv")).unwrap(), fs::read(eval_out.path().join("confusion.csv")).unwrap());
}

#[test]
fn ssl_with_disabled_terms_matches_supervised_metrics() {
    let data = tempfile::tempdir().unwrap();
    gen_small(data.path(), "2", &[]);
    let sup = tempfile::tempdir().unwrap();
    let ssl = tempfile::tempdir().unwrap();
    // 28 labelled and 60 unlabelled images: one SSL epoch spans two supervised ones.
    let a = train_small(data.path(), sup.path(), &["--seed", "4", "--epochs", "2"]);
    let b = train_small(
        data.path(),
        ssl.path(),
        &["--seed", "4", "--epochs", "1", "--mode", "ssl", "--lambda", "0", "--entropy-weight", "0", "--tsa", "disabled"],
    );
    assert_eq!(fs::read(a.join("confusion.csv")).unwrap(), fs::read(b.join("confusion.csv")).unwrap());
    assert_eq!(fs::read(a.join("model.ckpt")).unwrap(), fs::read(b.join("model.ckpt")).unwrap());
}

#[test]
fn compare_flags_runs_from_different_test_sets() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    gen_small(d1.path(), "1", &[]);
    gen_small(d2.path(), "2", &[]);
    let o1 = tempfile::tempdir().unwrap();
    let o2 = tempfile::tempdir().unwrap();
    let r1 = train_small(d1.path(), o1.path(), &[]);
    let r2 = train_small(d2.path(), o2.path(), &["--mode", "ssl"]);
    let out = ssl_lab(&["compare", "--runs", p(&r1), p(&r2), "--out", p(o1.path())]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));

    let o3 = tempfile::tempdir().unwrap();
    let r3 = train_small(d1.path(), o3.path(), &["--mode", "ssl"]);
    let stdout = ok(&ssl_lab(&["compare", "--runs", p(&r1), p(&r3), "--out", p(o3.path())]));
    assert!(stdout.lines().count() >= 2);
    let csv = fs::read_to_string(o3.path().join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);

    let rep = tempfile::tempdir().unwrap();
    ok(&ssl_lab(&["report", "--runs", p(&r1), p(&r3), "--out", p(rep.path())]));
    assert!(rep.path().join("comparison.svg").is_file());
}

#[test]
fn grid_writes_a_summary_and_resumes() {
    let data = tempfile::tempdir().unwrap();
    gen_small(data.path(), "5", &[]);
    let out = tempfile::tempdir().unwrap();
    let axes = out.path().join("axes.json");
    fs::write(&axes, r#"{"labelled_per_class": [2], "mode": ["supervised", "ssl"]}"#).unwrap();
    let args = ["grid", "--axes", p(&axes), "--data", p(data.path()), "--out", p(out.path()), "--epochs", "1"];
    ok(&ssl_lab(&args));
    let summary = fs::read_to_string(out.path().join("grid_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    let again = ok(&ssl_lab(&args));
    assert!(again.contains("resumed"), "{again}");
    assert_eq!(fs::read_to_string(out.path().join("grid_summary.csv")).unwrap(), summary);
}
