//! Canonical stacking of sensitivities, moment covariance and right-hand side.
//!
//! Rows are ordered by group, then by source order inside the group. Every
//! matrix produced here shares that order.

use nalgebra::{DMatrix, DVector};

use super::{CohortSummary, Partition, SourceId};
use crate::error::{QifError, Result};
use crate::model::{BasisFamily, LinkFunction};

/// Location of one source's moment rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutEntry {
    pub source: SourceId,
    pub group: usize,
    /// First canonical row.
    pub offset: usize,
    pub dim: usize,
    /// Index into the summaries slice.
    pub summary: usize,
    /// Index of the source inside that summary.
    pub slot: usize,
    /// First row inside the summary's `V_k`.
    pub cohort_offset: usize,
    pub link: LinkFunction,
    pub basis: BasisFamily,
}

/// Canonical row layout for a partition over a set of cohort summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentLayout {
    pub entries: Vec<LayoutEntry>,
    pub groups: usize,
    pub p: usize,
    pub dim: usize,
    pub n_total: f64,
    /// `n_k` of every summary.
    pub cohort_sizes: Vec<f64>,
}

impl MomentLayout {
    pub fn new(summaries: &[CohortSummary], partition: &Partition) -> Result<Self> {
        if summaries.is_empty() {
            return Err(QifError::Config("no cohort summaries supplied".into()));
        }
        for (i, s) in summaries.iter().enumerate() {
            s.validate()?;
            if summaries[..i].iter().any(|o| o.cohort_id == s.cohort_id) {
                return Err(QifError::Config(format!("cohort {} supplied twice", s.cohort_id)));
            }
        }
        let p = summaries[0].sources[0].p();
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut used = 0;
        for (g, group) in partition.groups().iter().enumerate() {
            let mut link = None;
            for &src in group {
                let (summary, cs) = summaries
                    .iter()
                    .enumerate()
                    .find(|(_, s)| s.cohort_id == src.cohort)
                    .ok_or(QifError::MissingSource(src))?;
                let (slot, fit) = cs.source(src.block).ok_or(QifError::MissingSource(src))?;
                if fit.p() != p {
                    return Err(QifError::Dimension(format!("source {src} has p = {}, expected {p}", fit.p())));
                }
                if *link.get_or_insert(fit.link) != fit.link {
                    return Err(QifError::Partition(format!("group {} mixes link functions at {src}", g + 1)));
                }
                let cohort_offset = cs.block_offsets()[slot];
                entries.push(LayoutEntry {
                    source: src,
                    group: g,
                    offset,
                    dim: fit.moment_dim(),
                    summary,
                    slot,
                    cohort_offset,
                    link: fit.link,
                    basis: fit.basis,
                });
                offset += fit.moment_dim();
                used += 1;
            }
        }
        let supplied: usize = summaries.iter().map(|s| s.sources.len()).sum();
        if supplied != used {
            return Err(QifError::Partition(format!(
                "summaries carry {supplied} sources but the partition covers {used}"
            )));
        }
        let cohort_sizes: Vec<f64> = summaries.iter().map(|s| s.n as f64).collect();
        Ok(MomentLayout {
            entries,
            groups: partition.group_count(),
            p,
            dim: offset,
            n_total: cohort_sizes.iter().sum(),
            cohort_sizes,
        })
    }

    pub fn params(&self) -> usize {
        self.groups * self.p
    }

    /// Canonical rows belonging to summary `k`, as (canonical offset, cohort offset, dim).
    pub fn cohort_rows(&self, k: usize) -> impl Iterator<Item = &LayoutEntry> {
        self.entries.iter().filter(move |e| e.summary == k)
    }
}

/// Stacked `Ŝ = blockdiag{(n_k Ŝ_jk)_{(j,k)∈P_g}}`.
pub fn stack_sensitivities(summaries: &[CohortSummary], partition: &Partition) -> Result<DMatrix<f64>> {
    let layout = MomentLayout::new(summaries, partition)?;
    Ok(stacked_sensitivity(summaries, &layout))
}

pub(crate) fn stacked_sensitivity(summaries: &[CohortSummary], layout: &MomentLayout) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(layout.dim, layout.params());
    for e in &layout.entries {
        let cs = &summaries[e.summary];
        let block = &cs.sources[e.slot].s_hat * cs.n as f64;
        s.view_mut((e.offset, e.group * layout.p), (e.dim, layout.p)).copy_from(&block);
    }
    s
}

/// `V̂_N`: each cohort's `V_k` scaled by `n_k/N` and scattered into canonical
/// order. Entries pairing different cohorts are zero.
pub fn assemble_weight(summaries: &[CohortSummary], partition: &Partition) -> Result<DMatrix<f64>> {
    let layout = MomentLayout::new(summaries, partition)?;
    Ok(dense_weight(summaries, &layout))
}

pub(crate) fn dense_weight(summaries: &[CohortSummary], layout: &MomentLayout) -> DMatrix<f64> {
    let mut v = DMatrix::zeros(layout.dim, layout.dim);
    for (k, cs) in summaries.iter().enumerate() {
        let scale = cs.n as f64 / layout.n_total;
        for a in layout.cohort_rows(k) {
            for b in layout.cohort_rows(k) {
                let block = cs.v.view((a.cohort_offset, b.cohort_offset), (a.dim, b.dim)) * scale;
                v.view_mut((a.offset, b.offset), (a.dim, b.dim)).copy_from(&block);
            }
        }
    }
    v
}

/// Stacked right-hand side `{(n_k Ŝ_jk θ̂_jk)}`.
pub fn stacked_rhs(summaries: &[CohortSummary], partition: &Partition) -> Result<DVector<f64>> {
    let layout = MomentLayout::new(summaries, partition)?;
    let mut b = DVector::zeros(layout.dim);
    for e in &layout.entries {
        let cs = &summaries[e.summary];
        let src = &cs.sources[e.slot];
        b.rows_mut(e.offset, e.dim).copy_from(&((&src.s_hat * cs.n as f64) * &src.theta_hat));
    }
    Ok(b)
}

/// The linear moment system solved by the integrated estimator.
///
/// `rhs` is stored centered at `anchor`: `rhs = b − Ŝ·anchor`, computed source by
/// source as `n_k Ŝ_jk (θ̂_jk − anchor_g)`. The estimate is then
/// `anchor + (ŜᵀV⁻¹Ŝ)⁻¹ ŜᵀV⁻¹ rhs`, which reproduces `anchor` exactly when
/// every source in a group already agrees with it.
#[derive(Debug, Clone)]
pub struct MomentSystem {
    pub s: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub anchor: DVector<f64>,
    pub n_total: f64,
}

impl MomentSystem {
    pub fn assemble(summaries: &[CohortSummary], partition: &Partition) -> Result<Self> {
        let layout = MomentLayout::new(summaries, partition)?;
        Ok(Self::from_layout(summaries, &layout))
    }

    pub(crate) fn from_layout(summaries: &[CohortSummary], layout: &MomentLayout) -> Self {
        let anchor = group_anchor(summaries, layout);
        MomentSystem {
            s: stacked_sensitivity(summaries, layout),
            v: dense_weight(summaries, layout),
            rhs: centered_rhs(summaries, layout, &anchor),
            anchor,
            n_total: layout.n_total,
        }
    }

    pub fn dim(&self) -> usize {
        self.v.nrows()
    }

    pub fn params(&self) -> usize {
        self.s.ncols()
    }
}

/// θ̂ of the first source in every group.
pub(crate) fn group_anchor(summaries: &[CohortSummary], layout: &MomentLayout) -> DVector<f64> {
    let mut anchor = DVector::zeros(layout.params());
    for g in 0..layout.groups {
        let e = layout.entries.iter().find(|e| e.group == g).expect("groups are non-empty");
        anchor.rows_mut(g * layout.p, layout.p).copy_from(&summaries[e.summary].sources[e.slot].theta_hat);
    }
    anchor
}

pub(crate) fn centered_rhs(summaries: &[CohortSummary], layout: &MomentLayout, anchor: &DVector<f64>) -> DVector<f64> {
    let mut rhs = DVector::zeros(layout.dim);
    for e in &layout.entries {
        let cs = &summaries[e.summary];
        let src = &cs.sources[e.slot];
        let delta = &src.theta_hat - anchor.rows(e.group * layout.p, layout.p);
        rhs.rows_mut(e.offset, e.dim).copy_from(&((&src.s_hat * cs.n as f64) * delta));
    }
    rhs
}
