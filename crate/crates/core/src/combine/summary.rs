//! Worker payloads: everything the coordinator needs from one cohort.

use nalgebra::{DMatrix, DVector};

use super::SourceId;
use crate::error::{QifError, Result};
use rayon::prelude::*;

use crate::model::{fit_source, BasisFamily, BasisSet, CohortData, LinkFunction, SolverControl, SourceFit};

pub const SUMMARY_FORMAT_VERSION: u16 = 1;

/// Fitted quantities of one block within a cohort summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSummary {
    pub block: u32,
    pub link: LinkFunction,
    pub basis: BasisFamily,
    pub theta_hat: DVector<f64>,
    /// (p·s)×p sensitivity.
    pub s_hat: DMatrix<f64>,
    pub q_value: f64,
    pub converged: bool,
    pub iterations: u32,
    pub dispersion: f64,
}

impl SourceSummary {
    pub fn from_fit(block: u32, link: LinkFunction, basis: BasisFamily, fit: &SourceFit) -> Self {
        SourceSummary {
            block,
            link,
            basis,
            theta_hat: fit.theta_hat.clone(),
            s_hat: fit.s_hat.clone(),
            q_value: fit.q_value,
            converged: fit.converged,
            iterations: fit.iterations as u32,
            dispersion: fit.dispersion,
        }
    }

    pub fn p(&self) -> usize {
        self.theta_hat.len()
    }

    pub fn s(&self) -> usize {
        BasisSet::new(self.basis).size()
    }

    pub fn moment_dim(&self) -> usize {
        self.p() * self.s()
    }
}

/// All source fits of one cohort plus the within-cohort moment covariance
/// `V_k = (1/n_k) Σ_i ψ_{i,k} ψ_{i,k}ᵀ`, where `ψ_{i,k}` stacks the block
/// scores of participant `i` in block order.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortSummary {
    pub format_version: u16,
    pub cohort_id: u32,
    pub n: u64,
    pub sources: Vec<SourceSummary>,
    pub v: DMatrix<f64>,
}

impl CohortSummary {
    /// Builds the summary from per-block fits over the same participants.
    pub fn from_fits(cohort_id: u32, fits: &[(u32, LinkFunction, BasisFamily, &SourceFit)]) -> Result<Self> {
        let n = fits
            .first()
            .map(|f| f.3.n())
            .ok_or_else(|| QifError::Dimension(format!("cohort {cohort_id} has no fits")))?;
        let mut offsets = Vec::with_capacity(fits.len());
        let mut dim = 0;
        for (j, _, basis, fit) in fits {
            if fit.n() != n {
                return Err(QifError::Dimension(format!(
                    "cohort {cohort_id}: block {j} archived {} participants, expected {n}",
                    fit.n()
                )));
            }
            if fit.moment_dim() != fit.p() * BasisSet::new(*basis).size() {
                return Err(QifError::Dimension(format!("cohort {cohort_id}: block {j} basis/score mismatch")));
            }
            offsets.push(dim);
            dim += fit.moment_dim();
        }
        let mut v = DMatrix::zeros(dim, dim);
        let mut stacked = DVector::zeros(dim);
        for i in 0..n {
            for ((_, _, _, fit), &off) in fits.iter().zip(&offsets) {
                stacked.rows_mut(off, fit.moment_dim()).copy_from(&fit.psi_at_fit[i]);
            }
            v.syger(1.0, &stacked, &stacked, 1.0);
        }
        v.fill_upper_triangle_with_lower_triangle();
        v /= n as f64;
        let sources =
            fits.iter().map(|(j, link, basis, fit)| SourceSummary::from_fit(*j, *link, *basis, fit)).collect();
        Ok(CohortSummary { format_version: SUMMARY_FORMAT_VERSION, cohort_id, n: n as u64, sources, v })
    }

    /// Fits every block of a cohort and summarizes the fits. Blocks are fitted
    /// in parallel; each fit is itself sequential, so the result does not
    /// depend on the thread count.
    pub fn fit(cohort: &CohortData, ctrl: &SolverControl) -> Result<(Self, Vec<SourceFit>)> {
        let fits: Vec<SourceFit> =
            cohort.blocks.par_iter().map(|(_, data)| fit_source(data, None, ctrl)).collect::<Result<_>>()?;
        let refs: Vec<_> =
            cohort.blocks.iter().zip(&fits).map(|((j, data), fit)| (*j, data.link, data.basis.family, fit)).collect();
        let summary = Self::from_fits(cohort.cohort_id, &refs)?;
        Ok((summary, fits))
    }

    /// Checks the internal dimensions of a (possibly deserialized) summary.
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(QifError::Format(format!("cohort {} summary has no sources", self.cohort_id)));
        }
        let mut dim = 0;
        for src in &self.sources {
            if src.s_hat.nrows() != src.moment_dim() || src.s_hat.ncols() != src.p() {
                return Err(QifError::Dimension(format!(
                    "cohort {} block {}: sensitivity is {}×{}, expected {}×{}",
                    self.cohort_id,
                    src.block,
                    src.s_hat.nrows(),
                    src.s_hat.ncols(),
                    src.moment_dim(),
                    src.p()
                )));
            }
            dim += src.moment_dim();
        }
        if self.v.nrows() != dim || self.v.ncols() != dim {
            return Err(QifError::Dimension(format!(
                "cohort {}: V_k is {}×{}, fits imply {dim}",
                self.cohort_id,
                self.v.nrows(),
                self.v.ncols()
            )));
        }
        if self.n == 0 {
            return Err(QifError::Format(format!("cohort {} reports zero participants", self.cohort_id)));
        }
        Ok(())
    }

    pub fn moment_dim(&self) -> usize {
        self.v.nrows()
    }

    /// Offset of each block's rows inside `v`.
    pub fn block_offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.sources.len());
        let mut acc = 0;
        for s in &self.sources {
            out.push(acc);
            acc += s.moment_dim();
        }
        out
    }

    pub fn source(&self, block: u32) -> Option<(usize, &SourceSummary)> {
        self.sources.iter().enumerate().find(|(_, s)| s.block == block)
    }

    pub fn source_ids(&self) -> Vec<SourceId> {
        self.sources.iter().map(|s| SourceId::new(s.block, self.cohort_id)).collect()
    }
}
