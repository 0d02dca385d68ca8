use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qifmeta::runtime::{JobConfig, PartitionSpec, Report};
use qifmeta::simgen::SimDesign;
use serde_json::Value;

fn qifmeta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qifmeta")).args(args).env_remove("QIFMETA_THREADS").output().unwrap()
}

fn design(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("designs").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout_paths(o: &Output) -> Vec<PathBuf> {
    String::from_utf8_lossy(&o.stdout).lines().map(PathBuf::from).collect()
}

/// Exports replication 0 of the small linear design and returns the job file.
fn export(dir: &Path) -> PathBuf {
    let o = qifmeta(&["simulate", "--config", s(&design("linear.toml")), "--out", s(dir), "--export", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("job.toml")
}

fn numbers_close(a: &Value, b: &Value, tol: f64) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0)
        }
        (Value::Array(x), Value::Array(y)) => {
            x.len() == y.len() && x.iter().zip(y).all(|(u, v)| numbers_close(u, v, tol))
        }
        (Value::Object(x), Value::Object(y)) => {
            x.len() == y.len() && x.iter().all(|(k, u)| y.get(k).is_some_and(|v| numbers_close(u, v, tol)))
        }
        _ => a == b,
    }
}

fn report_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn combine_without_summaries_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let job = export(dir.path());
    let o = qifmeta(&["combine", "--config", s(&job), "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("expected cohorts 1, 2, 3"), "{}", stderr(&o));
}

#[test]
fn unknown_flags_are_rejected() {
    let o = qifmeta(&["fit", "--config", "job.toml", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--frobnicate"));
}

#[test]
fn invalid_thread_count_is_a_config_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_qifmeta"))
        .args(["test", "--fine", "a.json", "--coarse", "b.json"])
        .env("QIFMETA_THREADS", "lots")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("QIFMETA_THREADS"));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = qifmeta(&["fit", "--config", s(&dir.path().join("nope.toml"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn workers_and_combine_match_monolithic_fit() {
    let dir = tempfile::tempdir().unwrap();
    let job = export(dir.path());
    let mono = dir.path().join("mono");
    let o = qifmeta(&["fit", "--config", s(&job), "--out", s(&mono), "--second-round"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let ex = dir.path().join("exchange");
    let mut summaries = Vec::new();
    for k in ["1", "2", "3"] {
        let o = qifmeta(&["worker", "--config", s(&job), "--cohort", k, "--out", s(&ex), "--second-round"]);
        assert!(o.status.success(), "{}", stderr(&o));
        summaries.extend(stdout_paths(&o));
    }
    let mut args = vec!["combine", "--config", s(&job), "--out", s(&ex), "--second-round"];
    args.extend(summaries.iter().map(|p| s(p)));
    let o = qifmeta(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let requests = stdout_paths(&o);
    assert_eq!(requests.len(), 1);
    assert!(!ex.join("report.json").exists());

    let mut scores = Vec::new();
    for k in ["1", "2", "3"] {
        let o = qifmeta(&["worker", "--config", s(&job), "--cohort", k, "--out", s(&ex), "--round", "2"]);
        assert!(o.status.success(), "{}", stderr(&o));
        scores.extend(stdout_paths(&o));
    }
    for sc in &scores {
        args.push("--scores");
        args.push(s(sc));
    }
    let o = qifmeta(&args);
    assert!(o.status.success(), "{}", stderr(&o));

    let a = report_json(&mono.join("report.json"));
    let b = report_json(&ex.join("report.json"));
    assert!(numbers_close(&a, &b, 1e-10));
    assert!(a["fit"]["q_n"].as_f64().unwrap() >= 0.0);
}

#[test]
fn run_dispatches_on_mode_with_json_messages() {
    let dir = tempfile::tempdir().unwrap();
    let job = export(dir.path());
    let ex = dir.path().join("ex");
    let run = |extra: &[&str]| {
        let mut args = vec!["run", "--config", s(&job), "--out", s(&ex), "--second-round", "--json"];
        args.extend_from_slice(extra);
        let o = qifmeta(&args);
        assert!(o.status.success(), "{}", stderr(&o));
    };
    for k in ["1", "2", "3"] {
        run(&["--mode", "worker", "--cohort", k]);
    }
    run(&["--mode", "coordinator"]);
    for k in ["1", "2", "3"] {
        run(&["--mode", "worker", "--cohort", k]);
    }
    run(&["--mode", "coordinator"]);
    let text = std::fs::read_to_string(ex.join("cohort-1.summary.qifm")).unwrap();
    assert!(text.trim_start().starts_with('{'));
    let report = Report::load(ex.join("report.json")).unwrap();
    assert_eq!(report.rounds, 2);
    assert!(report.fit.is_some());

    let mono = dir.path().join("mono");
    let o = qifmeta(&["run", "--config", s(&job), "--out", s(&mono), "--second-round"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(numbers_close(&report_json(&mono.join("report.json")), &report_json(&ex.join("report.json")), 1e-10));
}

#[test]
fn nested_test_from_two_reports() {
    let dir = tempfile::tempdir().unwrap();
    let job = export(dir.path());
    let coarse = dir.path().join("coarse");
    let o = qifmeta(&["fit", "--config", s(&job), "--out", s(&coarse), "--second-round"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let mut cfg = JobConfig::load(&job).unwrap();
    cfg.partition = PartitionSpec {
        name: Some("by-block".into()),
        block_groups: Some(vec![vec![1], vec![2]]),
        source_groups: None,
        labels: None,
    };
    let fine_job = dir.path().join("fine.toml");
    std::fs::write(&fine_job, cfg.to_toml()).unwrap();
    let fine = dir.path().join("fine");
    let o = qifmeta(&["fit", "--config", s(&fine_job), "--out", s(&fine), "--second-round"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let record = dir.path().join("test.json");
    let o = qifmeta(&[
        "test",
        "--fine",
        s(&fine.join("report.json")),
        "--coarse",
        s(&coarse.join("report.json")),
        "--out",
        s(&record),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v = report_json(&record);
    assert_eq!(v["df"], 3);
    assert!(v["q"].as_f64().unwrap() >= 0.0);
    let p = v["p_value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));

    // without a second round there is no statistic to test
    let plain = dir.path().join("plain");
    assert!(qifmeta(&["fit", "--config", s(&job), "--out", s(&plain)]).status.success());
    let o = qifmeta(&["test", "--fine", s(&fine.join("report.json")), "--coarse", s(&plain.join("report.json"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--second-round"));
}

#[test]
fn simulate_writes_metrics_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = qifmeta(&[
        "simulate",
        "--config",
        s(&design("linear.toml")),
        "--out",
        s(dir.path()),
        "--replications",
        "5",
        "--seed",
        "11",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    for col in ["RMSE", "ESE", "ASE", "CI", "ERR"] {
        assert!(header.contains(col), "{header}");
    }
    assert_eq!(csv.lines().count(), 1 + 3);
    let again = tempfile::tempdir().unwrap();
    let o = qifmeta(&[
        "simulate",
        "--config",
        s(&design("linear.toml")),
        "--out",
        s(again.path()),
        "--replications",
        "5",
        "--seed",
        "11",
    ]);
    assert!(o.status.success());
    assert_eq!(csv, std::fs::read_to_string(again.path().join("metrics.csv")).unwrap());
}

#[test]
fn bundled_designs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("designs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let d = SimDesign::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        d.validate().unwrap();
        n += 1;
    }
    assert!(n >= 3);
}
