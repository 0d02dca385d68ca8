use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::combine::{Diagnostics, IntegratedResult, Partition, SourceId, SourceSummary};
use crate::error::{QifError, Result};
use crate::inference::{FitStatistic, NestedTest};

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub group: String,
    pub index: usize,
    pub estimate: f64,
    pub std_error: f64,
    /// Wald statistic for a zero coefficient.
    pub z: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub name: String,
    pub groups: usize,
    pub fit: Option<FitStatistic>,
    /// Position in the BIC ranking, 1 = preferred. Absent without a second round.
    pub bic_rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRow {
    pub source: SourceId,
    pub theta_hat: Vec<f64>,
    pub q_value: f64,
    pub converged: bool,
    pub iterations: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestedRow {
    pub fine: String,
    pub coarse: String,
    pub test: NestedTest,
}

/// Versioned result document written by `fit` and `combine`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format_version: u32,
    /// Communication rounds used: 1 for estimation only, 2 with `Q_N`.
    pub rounds: u8,
    pub n_total: f64,
    pub p: usize,
    pub partition: Partition,
    pub coefficients: Vec<CoefficientRow>,
    /// Row-major covariance of the stacked estimate.
    pub covariance: Vec<Vec<f64>>,
    pub fit: Option<FitStatistic>,
    pub candidates: Vec<CandidateRow>,
    pub nested_tests: Vec<NestedRow>,
    pub sources: Vec<SourceRow>,
    pub diagnostics: Diagnostics,
}

pub fn wald_p_value(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

pub(crate) fn coefficient_rows(result: &IntegratedResult) -> Vec<CoefficientRow> {
    let se = result.std_errors();
    let p = result.p();
    (0..result.theta.len())
        .map(|i| {
            let z = result.theta[i] / se[i];
            CoefficientRow {
                group: result.partition.label(i / p),
                index: i % p,
                estimate: result.theta[i],
                std_error: se[i],
                z,
                p_value: wald_p_value(z),
            }
        })
        .collect()
}

pub(crate) fn source_row(cohort: u32, s: &SourceSummary) -> SourceRow {
    SourceRow {
        source: SourceId::new(s.block, cohort),
        theta_hat: s.theta_hat.iter().copied().collect(),
        q_value: s.q_value,
        converged: s.converged,
        iterations: s.iterations,
    }
}

impl Report {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| QifError::io(path, e))?;
        let report: Report =
            serde_json::from_str(&text).map_err(|e| QifError::Format(format!("{}: {e}", path.display())))?;
        if report.format_version != REPORT_FORMAT_VERSION {
            return Err(QifError::Format(format!("unsupported report format_version {}", report.format_version)));
        }
        Ok(report)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.to_json();
        text.push('\n');
        std::fs::write(path, text).map_err(|e| QifError::io(path, e))
    }

    pub fn converged(&self) -> bool {
        self.diagnostics.nonconverged_sources.is_empty()
    }

    /// Forest-plot rows: estimate with a 95% interval per coefficient.
    pub fn write_forest_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| QifError::io(path, e))?;
        let mut out = String::from("group,index,estimate,lower,upper\n");
        for c in &self.coefficients {
            let h = crate::simgen::Z_975 * c.std_error;
            out.push_str(&format!("{},{},{},{},{}\n", c.group, c.index, c.estimate, c.estimate - h, c.estimate + h));
        }
        f.write_all(out.as_bytes()).map_err(|e| QifError::io(path, e))
    }

    /// Normal QQ data of the Wald statistics.
    pub fn write_qq_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        use statrs::distribution::{ContinuousCDF, Normal};
        let path = path.as_ref();
        let normal = Normal::standard();
        let mut z: Vec<f64> = self.coefficients.iter().map(|c| c.z).collect();
        z.sort_by(f64::total_cmp);
        let n = z.len() as f64;
        let mut out = String::from("theoretical,observed\n");
        for (i, zi) in z.iter().enumerate() {
            out.push_str(&format!("{},{}\n", normal.inverse_cdf((i as f64 + 0.5) / n), zi));
        }
        std::fs::write(path, out).map_err(|e| QifError::io(path, e))
    }
}
