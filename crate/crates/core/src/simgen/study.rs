use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate, SimDesign};
use crate::combine::Partition;
use crate::error::{QifError, Result};
use crate::inference::FitStatistic;
use crate::pipeline::{combine, fit_cohorts, EstimationOptions};

/// 97.5% standard normal quantile.
pub const Z_975: f64 = 1.959963984540054;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyOptions {
    pub estimation: EstimationOptions,
    /// Computes `Q_N` for every replication.
    pub second_round: bool,
}

/// Outcome of one replication under the design's own partition.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub index: usize,
    pub theta: DVector<f64>,
    pub se: DVector<f64>,
    pub statistic: Option<FitStatistic>,
}

/// Per-coefficient Monte Carlo summary, named as in the usual simulation tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientMetrics {
    pub coefficient: String,
    pub truth: f64,
    #[serde(rename = "RMSE")]
    pub rmse: f64,
    #[serde(rename = "ESE")]
    pub ese: f64,
    #[serde(rename = "ASE")]
    pub ase: f64,
    #[serde(rename = "B")]
    pub bias: f64,
    #[serde(rename = "CI")]
    pub ci: f64,
    #[serde(rename = "L")]
    pub length: f64,
    /// Rejection rate of the 5% Wald test of `θ = truth`.
    #[serde(rename = "ERR")]
    pub err: f64,
    /// Set when the estimates do not vary, so coverage carries no information.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub design: String,
    pub requested: usize,
    pub used: usize,
    /// Replications dropped for non-convergence or numerical failure, with the reason.
    pub excluded: Vec<(usize, String)>,
    pub coefficients: Vec<CoefficientMetrics>,
}

impl MetricsReport {
    pub fn from_records(
        design: &str,
        requested: usize,
        labels: &[String],
        truth: &DVector<f64>,
        records: &[ReplicationRecord],
        excluded: Vec<(usize, String)>,
    ) -> Result<Self> {
        if records.len() < 2 {
            return Err(QifError::Config(format!("{} usable replications; metrics need at least 2", records.len())));
        }
        let r = records.len() as f64;
        let coefficients = (0..truth.len())
            .map(|c| {
                let est: Vec<f64> = records.iter().map(|rec| rec.theta[c]).collect();
                let mean = est.iter().sum::<f64>() / r;
                let ese = (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt();
                let rmse = (est.iter().map(|e| (e - truth[c]).powi(2)).sum::<f64>() / r).sqrt();
                let ase = records.iter().map(|rec| rec.se[c]).sum::<f64>() / r;
                let hits =
                    records.iter().filter(|rec| (rec.theta[c] - truth[c]).abs() <= Z_975 * rec.se[c]).count() as f64;
                let ci = hits / r;
                CoefficientMetrics {
                    coefficient: labels[c].clone(),
                    truth: truth[c],
                    rmse,
                    ese,
                    ase,
                    bias: mean - truth[c],
                    ci,
                    length: 2.0 * Z_975 * ase,
                    err: 1.0 - ci,
                    degenerate: ese == 0.0,
                }
            })
            .collect();
        Ok(MetricsReport { design: design.to_string(), requested, used: records.len(), excluded, coefficients })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| QifError::Format(e.to_string()))?;
        w.write_record(["coefficient", "truth", "RMSE", "ESE", "ASE", "B", "CI", "L", "ERR"])
            .map_err(|e| QifError::Format(e.to_string()))?;
        for c in &self.coefficients {
            let row = [c.truth, c.rmse, c.ese, c.ase, c.bias, c.ci, c.length, c.err].map(|v| v.to_string());
            w.write_record(std::iter::once(c.coefficient.clone()).chain(row))
                .map_err(|e| QifError::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| QifError::io(path, e))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| QifError::io(path, e))?;
        serde_json::to_writer_pretty(&mut f, self).map_err(|e| QifError::Format(e.to_string()))?;
        f.write_all(b"\n").map_err(|e| QifError::io(path, e))
    }
}

/// Coefficient labels `G<g>.theta<i>`, with the appended covariate called `null`.
pub fn coefficient_labels(design: &SimDesign, partition: &Partition) -> Vec<String> {
    let p = design.p();
    (0..partition.group_count())
        .flat_map(|g| {
            let label = partition.label(g);
            (0..p).map(move |i| {
                if design.null_covariate && i == p - 1 {
                    format!("{label}.null")
                } else {
                    format!("{label}.theta{i}")
                }
            })
        })
        .collect()
}

/// Generates, fits and integrates replication `rep` under the design's partition.
pub fn run_replication(design: &SimDesign, rep: usize, opts: &StudyOptions) -> Result<ReplicationRecord> {
    let partition = design.partition()?;
    let cohorts = generate(design, rep)?;
    let summaries = fit_cohorts(&cohorts, &opts.estimation.solver)?;
    if let Some(bad) = summaries
        .iter()
        .flat_map(|s| s.sources.iter().map(move |src| (s.cohort_id, src)))
        .find(|(_, src)| !src.converged)
    {
        return Err(QifError::Inference(format!("source ({},{}) did not converge", bad.1.block, bad.0)));
    }
    let (result, statistic) = combine(&cohorts, &summaries, &partition, &opts.estimation.integrate, opts.second_round)?;
    Ok(ReplicationRecord { index: rep, se: result.std_errors(), theta: result.theta, statistic })
}

#[derive(Debug, Clone)]
pub struct StudyOutcome {
    pub report: MetricsReport,
    pub records: Vec<ReplicationRecord>,
}

/// Runs `replications` independent replications in parallel. Results are
/// collected in replication order, so the report does not depend on scheduling.
pub fn run_study(design: &SimDesign, replications: usize, opts: &StudyOptions) -> Result<StudyOutcome> {
    if replications < 2 {
        return Err(QifError::Config("a study needs at least 2 replications".into()));
    }
    let partition = design.partition()?;
    let outcomes: Vec<Result<ReplicationRecord>> =
        (0..replications).into_par_iter().map(|rep| run_replication(design, rep, opts)).collect();
    let mut records = Vec::with_capacity(replications);
    let mut excluded = Vec::new();
    for (rep, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(r) => records.push(r),
            Err(e) if e.class() == crate::error::ErrorClass::Config => return Err(e),
            Err(e) => excluded.push((rep, e.to_string())),
        }
    }
    let labels = coefficient_labels(design, &partition);
    let truth = design.truth_for(&partition);
    let report = MetricsReport::from_records(&design.name, replications, &labels, &truth, &records, excluded)?;
    Ok(StudyOutcome { report, records })
}
