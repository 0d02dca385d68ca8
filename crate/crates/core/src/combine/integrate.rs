//! Closed-form integrated estimator and its sandwich covariance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::system::{centered_rhs, group_anchor, MomentLayout};
use super::{pca_reduce, CohortSummary, MomentSystem, Partition, SourceId, DEFAULT_PCA_THRESHOLD};
use crate::error::{QifError, Result};
use crate::linalg::{asymmetry, symmetrize, SpdFactor};

/// Reciprocal condition number below which a weight block counts as singular.
pub const WEIGHT_RCOND: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PcaMode {
    /// Fail on a singular weight matrix.
    Never,
    /// Reduce only when some `V̂_k` is singular.
    WhenSingular,
    /// Always solve in the principal-component basis.
    Always,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegrateOptions {
    pub pca: PcaMode,
    pub pca_threshold: f64,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        IntegrateOptions { pca: PcaMode::WhenSingular, pca_threshold: DEFAULT_PCA_THRESHOLD }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Reciprocal condition estimate of each cohort's `V̂_k`.
    pub cohort_rcond: Vec<(u32, f64)>,
    pub information_rcond: f64,
    /// Largest `|cov − covᵀ|` entry before symmetrization, relative to the largest entry.
    pub covariance_asymmetry: f64,
    pub pca_rank: Option<usize>,
    pub nonconverged_sources: Vec<SourceId>,
    pub warnings: Vec<String>,
}

/// `V̂_N⁻¹` in whichever form the solve used.
#[derive(Debug, Clone)]
pub(crate) enum WeightOp {
    /// Cholesky factor of every unscaled `V̂_k`.
    Blocks(Vec<SpdFactor>),
    /// Retained eigenvectors (canonical coordinates) and eigenvalues.
    Pca { basis: DMatrix<f64>, eigenvalues: DVector<f64> },
}

#[derive(Debug, Clone)]
pub struct IntegratedResult {
    /// θ̂_g stacked over groups.
    pub theta: DVector<f64>,
    /// Covariance of θ̂: `N (ŜᵀV̂_N⁻¹Ŝ)⁻¹`.
    pub covariance: DMatrix<f64>,
    pub partition: Partition,
    pub layout: MomentLayout,
    pub diagnostics: Diagnostics,
    pub(crate) weight: Option<WeightOp>,
}

impl IntegratedResult {
    pub(crate) fn assemble_plain(
        theta: DVector<f64>,
        covariance: DMatrix<f64>,
        partition: Partition,
        layout: MomentLayout,
        information_rcond: f64,
        asym: f64,
    ) -> Self {
        let scale = covariance.amax().max(f64::MIN_POSITIVE);
        IntegratedResult {
            theta,
            covariance,
            partition,
            layout,
            diagnostics: Diagnostics {
                information_rcond,
                covariance_asymmetry: asym / scale,
                ..Diagnostics::default()
            },
            weight: None,
        }
    }

    pub fn p(&self) -> usize {
        self.layout.p
    }

    pub fn groups(&self) -> usize {
        self.layout.groups
    }

    pub fn group_theta(&self, g: usize) -> DVector<f64> {
        self.theta.rows(g * self.p(), self.p()).into_owned()
    }

    pub fn group_covariance(&self, g: usize) -> DMatrix<f64> {
        let p = self.p();
        self.covariance.view((g * p, g * p), (p, p)).into_owned()
    }

    pub fn std_errors(&self) -> DVector<f64> {
        self.covariance.diagonal().map(|v| v.max(0.0).sqrt())
    }

    /// Retained moment dimension: the full stacked dimension unless PCA reduced it.
    pub fn moment_rank(&self) -> usize {
        self.diagnostics.pca_rank.unwrap_or(self.layout.dim)
    }

    /// `N · Ψᵀ V̂_N⁻¹ Ψ` for a canonical-order moment vector.
    pub fn weighted_quadratic(&self, psi: &DVector<f64>) -> Result<f64> {
        let n_total = self.layout.n_total;
        match &self.weight {
            None => Err(QifError::Inference("result carries no weight factorization".into())),
            Some(WeightOp::Blocks(factors)) => {
                let mut q = 0.0;
                for (k, factor) in factors.iter().enumerate() {
                    let rows: Vec<_> = self.layout.cohort_rows(k).collect();
                    let dim: usize = rows.iter().map(|e| e.dim).sum();
                    let mut x = DMatrix::zeros(dim, 1);
                    for e in &rows {
                        x.view_mut((e.cohort_offset, 0), (e.dim, 1)).copy_from(&psi.rows(e.offset, e.dim));
                    }
                    let w = factor.whiten(&x);
                    q += n_total / self.layout.cohort_sizes[k] * w.norm_squared();
                }
                Ok(n_total * q)
            }
            Some(WeightOp::Pca { basis, eigenvalues }) => {
                let proj = basis.tr_mul(psi);
                Ok(n_total * proj.iter().zip(eigenvalues.iter()).map(|(c, l)| c * c / l).sum::<f64>())
            }
        }
    }
}

/// Integrated estimator `θ̂ = (ŜᵀV̂_N⁻¹Ŝ)⁻¹ ŜᵀV̂_N⁻¹ {(n_k Ŝ_jk θ̂_jk)}` with
/// covariance `N (ŜᵀV̂_N⁻¹Ŝ)⁻¹`.
///
/// `V̂_N` is never formed on the default path: it is block diagonal by cohort
/// up to a row permutation, so each `V̂_k` is factorized on its own.
pub fn integrate(
    summaries: &[CohortSummary],
    partition: &Partition,
    opts: &IntegrateOptions,
) -> Result<IntegratedResult> {
    let layout = MomentLayout::new(summaries, partition)?;
    let mut diagnostics = Diagnostics::default();
    for (k, cs) in summaries.iter().enumerate() {
        for e in layout.cohort_rows(k) {
            let src = &cs.sources[e.slot];
            if !src.converged {
                diagnostics.nonconverged_sources.push(e.source);
            }
        }
    }
    if !diagnostics.nonconverged_sources.is_empty() {
        diagnostics.warnings.push(format!("{} source fit(s) did not converge", diagnostics.nonconverged_sources.len()));
    }

    let mut factors = Vec::with_capacity(summaries.len());
    let mut worst = f64::INFINITY;
    for cs in summaries {
        let f = SpdFactor::new(&cs.v);
        let rcond = f.as_ref().map_or(0.0, |f| f.rcond);
        diagnostics.cohort_rcond.push((cs.cohort_id, rcond));
        worst = worst.min(rcond);
        factors.push(f);
    }
    let singular = worst < WEIGHT_RCOND;
    if singular && opts.pca == PcaMode::Never {
        return Err(QifError::SingularWeight { rcond: worst });
    }

    let anchor = group_anchor(summaries, &layout);
    let n_total = layout.n_total;
    let (info, rhs, weight) = if singular || opts.pca == PcaMode::Always {
        if singular {
            diagnostics
                .warnings
                .push(format!("weight matrix singular (rcond {worst:e}); solved in principal-component basis"));
        }
        let system = MomentSystem {
            s: super::system::stacked_sensitivity(summaries, &layout),
            v: super::system::dense_weight(summaries, &layout),
            rhs: centered_rhs(summaries, &layout, &anchor),
            anchor: anchor.clone(),
            n_total,
        };
        let red = pca_reduce(&system, opts.pca_threshold)?;
        diagnostics.pca_rank = Some(red.rank());
        let (info, rhs) = reduced_normal_equations(&red.system, &red.retained);
        (info, rhs, WeightOp::Pca { basis: red.basis, eigenvalues: red.retained })
    } else {
        let factors: Vec<SpdFactor> = factors.into_iter().map(|f| f.expect("checked non-singular")).collect();
        let (info, rhs) = blocked_normal_equations(summaries, &layout, &factors, &anchor);
        (info, rhs, WeightOp::Blocks(factors))
    };

    let (theta, covariance, rcond, asym) = solve_normal_equations(&info, &rhs, &anchor, n_total, partition)?;
    diagnostics.information_rcond = rcond;
    diagnostics.covariance_asymmetry = asym;
    Ok(IntegratedResult { theta, covariance, partition: partition.clone(), layout, diagnostics, weight: Some(weight) })
}

/// Solves an explicit (possibly reduced or hand-built) moment system.
/// Returns θ̂ and its covariance.
pub fn solve_system(system: &MomentSystem, partition: &Partition) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let factor = SpdFactor::new(&system.v)
        .filter(|f| f.rcond >= WEIGHT_RCOND)
        .ok_or_else(|| QifError::SingularWeight { rcond: crate::linalg::sym_rcond(&system.v) })?;
    let ws = factor.whiten(&system.s);
    let wr = factor.whiten(&DMatrix::from_column_slice(system.dim(), 1, system.rhs.as_slice()));
    let info = ws.tr_mul(&ws);
    let rhs = ws.tr_mul(&wr).column(0).into_owned();
    let (theta, cov, _, _) = solve_normal_equations(&info, &rhs, &system.anchor, system.n_total, partition)?;
    Ok((theta, cov))
}

fn blocked_normal_equations(
    summaries: &[CohortSummary],
    layout: &MomentLayout,
    factors: &[SpdFactor],
    anchor: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let params = layout.params();
    let p = layout.p;
    let mut info = DMatrix::zeros(params, params);
    let mut rhs = DVector::zeros(params);
    for (k, (cs, factor)) in summaries.iter().zip(factors).enumerate() {
        let n_k = cs.n as f64;
        let dim = cs.moment_dim();
        let mut a = DMatrix::zeros(dim, params);
        let mut c = DMatrix::zeros(dim, 1);
        for e in layout.cohort_rows(k) {
            let src = &cs.sources[e.slot];
            let scaled = &src.s_hat * n_k;
            let delta = &src.theta_hat - anchor.rows(e.group * p, p);
            c.view_mut((e.cohort_offset, 0), (e.dim, 1)).copy_from(&(&scaled * delta));
            a.view_mut((e.cohort_offset, e.group * p), (e.dim, p)).copy_from(&scaled);
        }
        let wa = factor.whiten(&a);
        let wc = factor.whiten(&c);
        let scale = layout.n_total / n_k;
        info += wa.tr_mul(&wa) * scale;
        rhs += wa.tr_mul(&wc).column(0) * scale;
    }
    (info, rhs)
}

fn reduced_normal_equations(system: &MomentSystem, eigenvalues: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let mut ws = system.s.clone();
    let mut wr = system.rhs.clone();
    for (r, l) in eigenvalues.iter().enumerate() {
        let inv_sqrt = 1.0 / l.sqrt();
        ws.row_mut(r).scale_mut(inv_sqrt);
        wr[r] *= inv_sqrt;
    }
    (ws.tr_mul(&ws), ws.tr_mul(&wr))
}

fn solve_normal_equations(
    info: &DMatrix<f64>,
    rhs: &DVector<f64>,
    anchor: &DVector<f64>,
    n_total: f64,
    partition: &Partition,
) -> Result<(DVector<f64>, DMatrix<f64>, f64, f64)> {
    let mut info = info.clone();
    symmetrize(&mut info);
    let factor = SpdFactor::new(&info).ok_or_else(|| {
        let p = info.nrows() / partition.group_count().max(1);
        let weakest = (0..partition.group_count())
            .min_by(|&a, &b| {
                let da = info.view((a * p, a * p), (p, p)).trace();
                let db = info.view((b * p, b * p), (p, p)).trace();
                da.total_cmp(&db)
            })
            .unwrap_or(0);
        QifError::SingularInformation(format!(
            "information is not positive definite; weakest group is {}",
            partition.label(weakest)
        ))
    })?;
    let theta = anchor + factor.solve_vec(rhs);
    let mut cov = factor.inverse() * n_total;
    let asym = asymmetry(&cov) / cov.amax().max(f64::MIN_POSITIVE);
    symmetrize(&mut cov);
    Ok((theta, cov, factor.rcond, asym))
}
