use nalgebra::{DMatrix, DVector};

use super::{BasisSet, LinkFunction};
use crate::error::{QifError, Result};

/// One participant's outcome vector and its m×p covariate matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Participant {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
}

impl Participant {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>) -> Self {
        Participant { y, x }
    }

    pub fn m(&self) -> usize {
        self.y.len()
    }
}

/// Row-level data of one (block, cohort) source together with its marginal
/// model choices.
#[derive(Debug, Clone)]
pub struct SourceData {
    pub(crate) participants: Vec<Participant>,
    pub(crate) p: usize,
    pub link: LinkFunction,
    pub basis: BasisSet,
}

impl SourceData {
    pub fn new(participants: Vec<Participant>, link: LinkFunction, basis: BasisSet) -> Result<Self> {
        let first = participants.first().ok_or_else(|| QifError::Dimension("source has no participants".into()))?;
        let p = first.x.ncols();
        if p == 0 {
            return Err(QifError::Dimension("covariate matrices have no columns".into()));
        }
        for (i, part) in participants.iter().enumerate() {
            if part.m() == 0 {
                return Err(QifError::Dimension(format!("participant {i} has an empty outcome vector")));
            }
            if part.x.nrows() != part.m() {
                return Err(QifError::Dimension(format!(
                    "participant {i}: {} outcomes but {} covariate rows",
                    part.m(),
                    part.x.nrows()
                )));
            }
            if part.x.ncols() != p {
                return Err(QifError::Dimension(format!(
                    "participant {i}: {} covariates, expected {p}",
                    part.x.ncols()
                )));
            }
            if link == LinkFunction::Logit {
                if let Some(&v) = part.y.iter().find(|&&v| v != 0.0 && v != 1.0) {
                    return Err(QifError::NonBinaryOutcome { participant: i, value: v });
                }
            }
        }
        Ok(SourceData { participants, p, link, basis })
    }

    pub fn participants(&self) -> &[Participant] {
        &self.participants
    }

    pub fn n(&self) -> usize {
        self.participants.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Moment dimension `p·s`.
    pub fn moment_dim(&self) -> usize {
        self.p * self.basis.size()
    }

    pub fn total_rows(&self) -> usize {
        self.participants.iter().map(Participant::m).sum()
    }

    /// Copy with participants reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> SourceData {
        SourceData {
            participants: order.iter().map(|&i| self.participants[i].clone()).collect(),
            p: self.p,
            link: self.link,
            basis: self.basis,
        }
    }
}

/// All blocks of one cohort, aligned by participant: entry `i` of every block
/// belongs to the same person.
#[derive(Debug, Clone)]
pub struct CohortData {
    pub cohort_id: u32,
    /// `(block index j, data)` in block order.
    pub blocks: Vec<(u32, SourceData)>,
}

impl CohortData {
    pub fn new(cohort_id: u32, blocks: Vec<(u32, SourceData)>) -> Result<Self> {
        let n = blocks
            .first()
            .map(|(_, d)| d.n())
            .ok_or_else(|| QifError::Dimension(format!("cohort {cohort_id} has no blocks")))?;
        let p = blocks[0].1.p();
        for (j, d) in &blocks {
            if d.n() != n {
                return Err(QifError::Dimension(format!(
                    "cohort {cohort_id}: block {j} has {} participants, expected {n}",
                    d.n()
                )));
            }
            if d.p() != p {
                return Err(QifError::Dimension(format!(
                    "cohort {cohort_id}: block {j} has p = {}, expected {p}",
                    d.p()
                )));
            }
        }
        let mut seen: Vec<u32> = blocks.iter().map(|(j, _)| *j).collect();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != blocks.len() {
            return Err(QifError::Dimension(format!("cohort {cohort_id} repeats a block index")));
        }
        Ok(CohortData { cohort_id, blocks })
    }

    pub fn n(&self) -> usize {
        self.blocks[0].1.n()
    }

    pub fn block(&self, j: u32) -> Option<&SourceData> {
        self.blocks.iter().find(|(b, _)| *b == j).map(|(_, d)| d)
    }
}
