#![allow(dead_code)]

use std::path::Path;

use qifmeta::runtime::{export_replication, JobConfig};
use qifmeta::simgen::SimDesign;
use serde_json::Value;

/// Writes replication `rep` of `design` as CSV files and returns a job over them.
pub fn job_from_design(dir: &Path, design: &SimDesign, rep: usize, second_round: bool) -> JobConfig {
    export_replication(design, rep, dir, second_round).unwrap()
}

/// Largest relative difference over every number in two JSON documents.
/// Panics if the documents differ in shape or in any non-numeric value.
pub fn max_numeric_diff(a: &Value, b: &Value) -> f64 {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            (x - y).abs() / x.abs().max(y.abs()).max(1.0)
        }
        (Value::Array(x), Value::Array(y)) => {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(u, v)| max_numeric_diff(u, v)).fold(0.0, f64::max)
        }
        (Value::Object(x), Value::Object(y)) => {
            assert_eq!(x.keys().collect::<Vec<_>>(), y.keys().collect::<Vec<_>>());
            x.iter().map(|(k, u)| max_numeric_diff(u, &y[k])).fold(0.0, f64::max)
        }
        _ => {
            assert_eq!(a, b);
            0.0
        }
    }
}

pub fn setting_one(replications: usize) -> SimDesign {
    SimDesign::from_toml(&format!(
        r#"
        name = "setting-I-desk"
        cohort_sizes = [500, 500]
        block_sizes = [8, 10, 14, 18]
        link = "logit"
        correlation = "ar1"
        working = "ar1"
        theta = [[-4.44, 1.11, -2.22]]
        null_covariate = true
        seed = 20240611
        replications = {replications}
        "#
    ))
    .unwrap()
}
