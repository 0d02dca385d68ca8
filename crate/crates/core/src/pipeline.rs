//! In-process execution of the whole protocol: fit, summarize, integrate and
//! (optionally) the second scoring round. The distributed runtime moves the
//! same values through files.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::combine::{integrate, CohortSummary, IntegrateOptions, IntegratedResult, Partition};
use crate::error::Result;
use crate::inference::{q_statistic, round2_scores, FitStatistic};
use crate::model::{CohortData, SolverControl};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimationOptions {
    pub solver: SolverControl,
    pub integrate: IntegrateOptions,
}

/// Round one for every cohort.
pub fn fit_cohorts(cohorts: &[CohortData], solver: &SolverControl) -> Result<Vec<CohortSummary>> {
    cohorts.par_iter().map(|c| CohortSummary::fit(c, solver).map(|(s, _)| s)).collect()
}

/// Integrates under `partition` and, when `second_round` is set, scores every
/// source at the integrated estimate and computes `Q_N`.
pub fn combine(
    cohorts: &[CohortData],
    summaries: &[CohortSummary],
    partition: &Partition,
    opts: &IntegrateOptions,
    second_round: bool,
) -> Result<(IntegratedResult, Option<FitStatistic>)> {
    let result = integrate(summaries, partition, opts)?;
    if !second_round {
        return Ok((result, None));
    }
    let scores = cohorts
        .par_iter()
        .zip(summaries)
        .map(|(c, s)| round2_scores(c, s, partition, &result))
        .collect::<Result<Vec<_>>>()?;
    let stat = q_statistic(&result, &scores)?;
    Ok((result, Some(stat)))
}
