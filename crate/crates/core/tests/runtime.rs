mod common;

use std::path::PathBuf;

use common::{job_from_design, max_numeric_diff, setting_one};
use qifmeta::runtime::wire::encode;
use qifmeta::runtime::{
    coordinate_files, load_cohort, run_monolithic, worker_round1, worker_round1_files, worker_round2_files, Encoding,
    JobConfig, Mode, PartitionSpec, Payload,
};
use qifmeta::simgen::SimDesign;
use qifmeta::{ErrorClass, QifError};

fn distributed(cfg: &JobConfig, out: &std::path::Path, encoding: Encoding) -> qifmeta::runtime::Report {
    std::fs::create_dir_all(out).unwrap();
    let mut coord = cfg.clone();
    coord.mode = Mode::Coordinator;
    let summaries: Vec<PathBuf> = cfg
        .cohort_ids()
        .into_iter()
        .map(|k| {
            let mut w = cfg.clone();
            w.mode = Mode::Worker;
            w.cohort = Some(k);
            worker_round1_files(&w, k, out, encoding).unwrap()
        })
        .collect();
    let first = coordinate_files(&coord, &summaries, &[], out, encoding).unwrap();
    if !cfg.second_round {
        return first.report;
    }
    assert_eq!(first.report.rounds, 1);
    let scores: Vec<PathBuf> = cfg
        .cohort_ids()
        .into_iter()
        .flat_map(|k| worker_round2_files(cfg, k, out, &first.requests, encoding).unwrap())
        .collect();
    let second = coordinate_files(&coord, &summaries, &scores, out, encoding).unwrap();
    assert!(second.requests.is_empty());
    second.report
}

#[test]
fn files_reproduce_monolithic_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = job_from_design(dir.path(), &setting_one(1), 0, true);
    cfg.candidates.push(PartitionSpec {
        name: Some("by-block".into()),
        block_groups: Some(vec![vec![1], vec![2], vec![3], vec![4]]),
        source_groups: None,
        labels: None,
    });
    let mono = run_monolithic(&cfg).unwrap();
    assert_eq!(mono.rounds, 2);
    assert!(mono.fit.is_some());
    assert_eq!(mono.candidates.len(), 2);
    assert_eq!(mono.nested_tests.len(), 1);
    let mono_json = serde_json::to_value(&mono).unwrap();
    for (encoding, sub) in [(Encoding::Binary, "bin"), (Encoding::Json, "json")] {
        let report = distributed(&cfg, &dir.path().join(sub), encoding);
        let diff = max_numeric_diff(&mono_json, &serde_json::to_value(&report).unwrap());
        assert!(diff <= 1e-10, "{sub}: {diff}");
    }
}

#[test]
fn payloads_carry_no_row_level_data() {
    let dir = tempfile::tempdir().unwrap();
    let design = SimDesign { cohort_sizes: vec![60], ..setting_one(1) };
    let cfg = job_from_design(dir.path(), &design, 0, false);
    let cohort = load_cohort(&cfg, 1).unwrap();
    let bytes = encode(&Payload::Summary(worker_round1(&cfg, &cohort).unwrap()));
    let leaked = cohort
        .blocks
        .iter()
        .flat_map(|(_, d)| d.participants())
        .flat_map(|p| p.x.iter().skip(p.x.nrows()).copied())
        .filter(|v| {
            let pat = v.to_le_bytes();
            bytes.windows(8).any(|w| w == pat)
        });
    assert_eq!(leaked.count(), 0);
}

#[test]
fn combine_without_summaries_names_expected_cohorts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = job_from_design(dir.path(), &SimDesign { cohort_sizes: vec![40, 40], ..setting_one(1) }, 0, false);
    let err = coordinate_files(&cfg, &[], &[], dir.path(), Encoding::Binary).err().unwrap();
    assert_eq!(err.class(), ErrorClass::Config);
    assert!(err.to_string().contains("expected cohorts 1, 2"), "{err}");
}

#[test]
fn single_source_report_returns_worker_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let design = SimDesign { cohort_sizes: vec![200], block_sizes: vec![6], ..setting_one(1) };
    let cfg = job_from_design(dir.path(), &design, 0, true);
    let report = run_monolithic(&cfg).unwrap();
    let est: Vec<f64> = report.coefficients.iter().map(|c| c.estimate).collect();
    assert_eq!(est, report.sources[0].theta_hat);
}

#[test]
fn job_files_are_validated() {
    let base = r#"
        mode = "worker"
        [[source]]
        block = 1
        cohort = 1
        path = "a.csv"
        link = "logit"
        basis = "ar1"
    "#;
    let err = JobConfig::from_toml(base).unwrap_err();
    assert!(err.to_string().contains("cohort"), "{err}");
    assert!(JobConfig::from_toml(&format!("cohort = 1\n{base}")).is_ok());
    assert!(matches!(JobConfig::from_toml(&format!("cohort = 1\nbogus = 2\n{base}")), Err(QifError::Config(_))));
    // the partition may not mention undeclared sources
    let bad = format!("cohort = 1\n{base}\n[partition]\nblock_groups = [[1, 2]]\n");
    assert!(JobConfig::from_toml(&bad).is_err());
}
