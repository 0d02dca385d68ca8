use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::MomentSystem;
use crate::error::{QifError, Result};
use crate::linalg::symmetrize;

/// Default relative eigenvalue cut-off.
pub const DEFAULT_PCA_THRESHOLD: f64 = 1e-10;

/// A moment system rotated onto the leading principal components of `V̂_N`.
#[derive(Debug, Clone)]
pub struct PcaReduction {
    /// Reduced system; its `v` is the diagonal of retained eigenvalues.
    pub system: MomentSystem,
    /// Retained eigenvectors as columns, in canonical row coordinates.
    pub basis: DMatrix<f64>,
    pub retained: DVector<f64>,
    /// All eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Share of total variance per eigenvalue (negative round-off counts as zero).
    pub explained: Vec<f64>,
}

impl PcaReduction {
    pub fn rank(&self) -> usize {
        self.retained.len()
    }
}

/// Keeps eigenvectors of `V̂_N` whose eigenvalue exceeds `threshold · λ_max`
/// and projects `Ŝ`, `V̂_N` and the right-hand side onto them.
pub fn pca_reduce(system: &MomentSystem, threshold: f64) -> Result<PcaReduction> {
    let mut v = system.v.clone();
    symmetrize(&mut v);
    let eig = SymmetricEigen::new(v);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let lambda_max = eigenvalues.first().copied().unwrap_or(0.0);
    let cut = threshold.max(0.0) * lambda_max;
    let keep: Vec<usize> =
        order.iter().copied().filter(|&i| eig.eigenvalues[i] > cut && eig.eigenvalues[i] > 0.0).collect();
    let rank = keep.len();
    if rank < system.params() {
        return Err(QifError::UnderIdentified { rank, params: system.params() });
    }
    let basis = DMatrix::from_columns(&keep.iter().map(|&i| eig.eigenvectors.column(i)).collect::<Vec<_>>());
    let retained = DVector::from_iterator(rank, keep.iter().map(|&i| eig.eigenvalues[i]));
    let total: f64 = eigenvalues.iter().map(|l| l.max(0.0)).sum();
    let explained = eigenvalues.iter().map(|l| if total > 0.0 { l.max(0.0) / total } else { 0.0 }).collect();
    let reduced = MomentSystem {
        s: basis.tr_mul(&system.s),
        v: DMatrix::from_diagonal(&retained),
        rhs: basis.tr_mul(&system.rhs),
        anchor: system.anchor.clone(),
        n_total: system.n_total,
    };
    Ok(PcaReduction { system: reduced, basis, retained, eigenvalues, explained })
}
