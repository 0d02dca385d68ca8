//! Over-identification statistic, nested homogeneity test and GMM-BIC.

use std::cmp::Ordering;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;

use crate::combine::{CohortSummary, IntegratedResult, Partition, SourceId};
use crate::error::{QifError, Result};
use crate::linalg::{min_eigenvalue, spd_inverse};
use crate::model::{extended_score, BasisFamily, CohortData, LinkFunction};

/// Second-round payload: one cohort's extended scores re-evaluated at the
/// integrated estimate of each source's group.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortScores {
    pub cohort_id: u32,
    pub n: u64,
    pub sources: Vec<SourceScore>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceScore {
    pub block: u32,
    /// The θ̂_g the score was evaluated at, echoed back for verification.
    pub theta: DVector<f64>,
    /// `Ψ_jk(θ̂_g)`.
    pub psi: DVector<f64>,
}

/// Worker side of round two. Scores use the same variance scalar as the
/// round-one fit, read back from the cohort's own summary.
pub fn round2_scores(
    cohort: &CohortData,
    summary: &CohortSummary,
    partition: &Partition,
    result: &IntegratedResult,
) -> Result<CohortScores> {
    let mut sources = Vec::with_capacity(cohort.blocks.len());
    for (block, data) in &cohort.blocks {
        let src = SourceId::new(*block, cohort.cohort_id);
        let g = partition.group_of(src).ok_or(QifError::MissingSource(src))?;
        let theta = result.group_theta(g);
        let sigma2 = summary
            .source(*block)
            .map(|(_, s)| s.dispersion)
            .ok_or_else(|| QifError::Inference(format!("no round-one summary for source {src}")))?;
        let psi = extended_score(data, &theta, sigma2)?.psi;
        sources.push(SourceScore { block: *block, theta, psi });
    }
    Ok(CohortScores { cohort_id: cohort.cohort_id, n: cohort.n() as u64, sources })
}

/// Working-structure signature of one source, used to check that two fits are comparable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub source: SourceId,
    pub link: LinkFunction,
    pub basis: BasisFamily,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitStatistic {
    pub q_n: f64,
    pub df: usize,
    /// χ² upper tail; absent when `df = 0`.
    pub p_value: Option<f64>,
    pub bic: f64,
    pub n_total: f64,
    pub groups: usize,
    pub p: usize,
    pub partition: Partition,
    pub sources: Vec<SourceConfig>,
}

/// `Q_N = N Ψ_N(θ̂)ᵀ V̂_N⁻¹ Ψ_N(θ̂)` with `V̂_N` reused from the combine step.
pub fn q_statistic(result: &IntegratedResult, scores: &[CohortScores]) -> Result<FitStatistic> {
    let layout = &result.layout;
    let mut psi_n = DVector::zeros(layout.dim);
    let mut sources = Vec::with_capacity(layout.entries.len());
    for e in &layout.entries {
        let src = e.source;
        let cohort = scores
            .iter()
            .find(|c| c.cohort_id == src.cohort)
            .ok_or_else(|| QifError::Inference(format!("missing second-round payload for cohort {}", src.cohort)))?;
        let n_k = layout.cohort_sizes[e.summary];
        if cohort.n as f64 != n_k {
            return Err(QifError::Inference(format!(
                "cohort {} reports n = {} in round two but {n_k} in round one",
                src.cohort, cohort.n
            )));
        }
        let score = cohort
            .sources
            .iter()
            .find(|s| s.block == src.block)
            .ok_or_else(|| QifError::Inference(format!("missing second-round score for source {src}")))?;
        let theta = result.group_theta(e.group);
        if score.theta.len() != theta.len()
            || score.theta.iter().zip(theta.iter()).any(|(a, b)| a.to_bits() != b.to_bits())
        {
            return Err(QifError::Inference(format!("source {src} was scored at a different θ̂")));
        }
        if score.psi.len() != e.dim {
            return Err(QifError::Dimension(format!(
                "source {src} returned {} score entries, expected {}",
                score.psi.len(),
                e.dim
            )));
        }
        psi_n.rows_mut(e.offset, e.dim).copy_from(&(&score.psi * (n_k / layout.n_total)));
        sources.push(SourceConfig { source: src, link: e.link, basis: e.basis });
    }
    let q_n = result.weighted_quadratic(&psi_n)?.max(0.0);
    let rank = result.moment_rank();
    let params = layout.params();
    if rank < params {
        return Err(QifError::UnderIdentified { rank, params });
    }
    let df = rank - params;
    sources.sort_by_key(|s| s.source);
    Ok(FitStatistic {
        q_n,
        df,
        p_value: (df > 0).then(|| chi2_upper_tail(q_n, df)),
        bic: q_n - layout.n_total.ln() * df as f64,
        n_total: layout.n_total,
        groups: layout.groups,
        p: layout.p,
        partition: result.partition.clone(),
        sources,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestedTest {
    pub q: f64,
    pub df: usize,
    pub p_value: Option<f64>,
    /// Set when the raw difference was negative and clamped to zero.
    pub clamped: bool,
    pub raw_difference: f64,
    pub fine_labels: Vec<String>,
    pub coarse_labels: Vec<String>,
}

/// Tests a coarse partition against a finer one it is nested in:
/// `Q = Q_N(coarse) − Q_N(fine)` on `(G_fine − G_coarse)·p` degrees of freedom.
pub fn nested_test(fine: &FitStatistic, coarse: &FitStatistic) -> Result<NestedTest> {
    if fine.sources != coarse.sources || fine.p != coarse.p {
        return Err(QifError::Inference(
            "nested test needs identical sources, links and working structures in both fits".into(),
        ));
    }
    if fine.n_total != coarse.n_total {
        return Err(QifError::Inference("nested test needs both fits on the same data".into()));
    }
    if !coarse.partition.is_coarsening_of(&fine.partition) {
        return Err(QifError::Partition("coarse partition is not a union of fine groups".into()));
    }
    let raw = coarse.q_n - fine.q_n;
    let df = (fine.groups - coarse.groups) * fine.p;
    let q = raw.max(0.0);
    let labels = |p: &Partition| (0..p.group_count()).map(|g| p.label(g)).collect();
    Ok(NestedTest {
        q,
        df,
        p_value: (df > 0).then(|| chi2_upper_tail(q, df)),
        clamped: raw < 0.0,
        raw_difference: raw,
        fine_labels: labels(&fine.partition),
        coarse_labels: labels(&coarse.partition),
    })
}

/// Orders candidate partitions by BIC, smallest first; ties go to fewer groups.
/// Returns indices into `candidates`.
pub fn compare_bic(candidates: &[FitStatistic]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&candidates[a], &candidates[b]);
        match x.bic.total_cmp(&y.bic) {
            Ordering::Equal => x.groups.cmp(&y.groups),
            o => o,
        }
    });
    order
}

/// Smallest eigenvalue of `(N/n_k)·Avar(θ̂_jk) − N·Cov(θ̂_g)` for every source.
/// The integrated estimator is at least as efficient as each of its sources,
/// so these should be non-negative up to rounding.
pub fn efficiency_gaps(summaries: &[CohortSummary], result: &IntegratedResult) -> Result<Vec<(SourceId, f64)>> {
    let layout = &result.layout;
    let mut out = Vec::with_capacity(layout.entries.len());
    for e in &layout.entries {
        let cs = &summaries[e.summary];
        let src = &cs.sources[e.slot];
        let c = cs.v.view((e.cohort_offset, e.cohort_offset), (e.dim, e.dim)).into_owned();
        let info = src.s_hat.transpose() * spd_inverse(&c).ok_or(QifError::SingularWeight { rcond: 0.0 })? * &src.s_hat;
        let avar = spd_inverse(&info)
            .ok_or_else(|| QifError::SingularInformation(format!("source {} information", e.source)))?;
        let diff = avar * (layout.n_total / cs.n as f64) - result.group_covariance(e.group) * layout.n_total;
        out.push((e.source, min_eigenvalue(&diff)));
    }
    Ok(out)
}

/// `P(χ²_df > q)`.
pub fn chi2_upper_tail(q: f64, df: usize) -> f64 {
    if df == 0 {
        return if q > 0.0 { 0.0 } else { 1.0 };
    }
    if q <= 0.0 {
        return 1.0;
    }
    gamma_ur(df as f64 / 2.0, q / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi2_tail_matches_closed_forms() {
        // df = 2: exp(-q/2)
        for q in [0.1, 1.0, 5.0, 30.0] {
            let want = (-q / 2.0f64).exp();
            assert!((chi2_upper_tail(q, 2) - want).abs() <= 1e-12 * want.max(1e-300));
        }
        // df = 1: erfc(sqrt(q/2)); 3.841458820694124 is the 95% quantile
        assert!((chi2_upper_tail(3.841458820694124, 1) - 0.05).abs() < 1e-12);
        assert_eq!(chi2_upper_tail(0.0, 4), 1.0);
    }

    #[test]
    fn bic_ordering_breaks_ties_by_group_count() {
        let base = FitStatistic {
            q_n: 1.0,
            df: 3,
            p_value: None,
            bic: -10.0,
            n_total: 100.0,
            groups: 3,
            p: 1,
            partition: Partition::singletons(3, 1),
            sources: vec![],
        };
        let mut a = base.clone();
        a.groups = 1;
        let mut b = base.clone();
        b.bic = -20.0;
        assert_eq!(compare_bic(&[base.clone(), a, b]), vec![2, 1, 0]);
        assert_eq!(compare_bic(&[base]), vec![0]);
    }

    #[test]
    fn peptide_shaped_bic_prefers_integrative() {
        let mk = |bic: f64, groups| FitStatistic {
            q_n: 0.0,
            df: 0,
            p_value: None,
            bic,
            n_total: 1.0,
            groups,
            p: 1,
            partition: Partition::singletons(1, 1),
            sources: vec![],
        };
        assert_eq!(compare_bic(&[mk(-242.69, 4), mk(-284.71, 1)]), vec![1, 0]);
    }
}
