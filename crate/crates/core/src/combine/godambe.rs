//! Godambe-weighted combination for the fully homogeneous partition.
//!
//! With a single group the integrated estimator reduces to
//! `(Σ_k Σ_{i,j} n_k Ĵ_ijk)⁻¹ Σ_k Σ_{i,j} n_k Ĵ_ijk θ̂_jk` with
//! `Ĵ_ijk = Ŝ_ikᵀ [V̂_k⁻¹]_{i;j} Ŝ_jk`. This path inverts each `V̂_k` explicitly
//! and never builds the stacked system, so it cross-checks [`super::integrate`].

use nalgebra::{DMatrix, DVector};

use super::{CohortSummary, IntegratedResult, Partition};
use crate::error::{QifError, Result};
use crate::linalg::{asymmetry, spd_inverse, symmetrize, SpdFactor};

pub fn godambe_combine(summaries: &[CohortSummary], partition: &Partition) -> Result<IntegratedResult> {
    if partition.group_count() != 1 {
        return Err(QifError::Partition(format!(
            "Godambe combination needs a single group, got {}",
            partition.group_count()
        )));
    }
    let layout = super::MomentLayout::new(summaries, partition)?;
    let p = layout.p;
    let mut info = DMatrix::zeros(p, p);
    let mut weighted = DVector::zeros(p);
    for cs in summaries {
        let v_inv = spd_inverse(&cs.v).ok_or(QifError::SingularWeight { rcond: 0.0 })?;
        let offsets = cs.block_offsets();
        let n_k = cs.n as f64;
        for (a, src_i) in cs.sources.iter().enumerate() {
            for (b, src_j) in cs.sources.iter().enumerate() {
                let block = v_inv.view((offsets[a], offsets[b]), (src_i.moment_dim(), src_j.moment_dim()));
                let j_ijk = src_i.s_hat.tr_mul(&(block * &src_j.s_hat)) * n_k;
                weighted += &j_ijk * &src_j.theta_hat;
                info += j_ijk;
            }
        }
    }
    symmetrize(&mut info);
    let factor = SpdFactor::new(&info)
        .ok_or_else(|| QifError::SingularInformation("summed Godambe information is not positive definite".into()))?;
    let theta = factor.solve_vec(&weighted);
    let mut covariance = factor.inverse();
    let asym = asymmetry(&covariance);
    symmetrize(&mut covariance);
    Ok(IntegratedResult::assemble_plain(theta, covariance, partition.clone(), layout, factor.rcond, asym))
}
