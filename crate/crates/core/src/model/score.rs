//! Extended score, its Jacobian and the quadratic inference function.

use nalgebra::{DMatrix, DVector};

use super::{LinkFunction, Participant, SourceData};
use crate::error::{QifError, Result};
use crate::linalg::{sym_rcond, SpdFactor};

/// Fitted means must stay this far inside (0, 1) for the logit link.
pub const MEAN_GUARD: f64 = 1e-12;
/// Reciprocal condition number below which the moment covariance is ridged.
pub const RIDGE_RCOND: f64 = 1e-12;
/// Ridge size relative to the mean diagonal of the moment covariance.
pub const RIDGE_SCALE: f64 = 1e-8;

/// Extended score averaged over participants, plus the individual terms.
#[derive(Debug, Clone)]
pub struct ScoreEval {
    pub psi: DVector<f64>,
    pub per_participant: Vec<DVector<f64>>,
}

pub(crate) struct Evaluation {
    pub psi: DVector<f64>,
    pub per_participant: Vec<DVector<f64>>,
    /// Mean of the per-participant Jacobians ∇ψ_i (not negated).
    pub jacobian: Option<DMatrix<f64>>,
}

/// Per-coordinate quantities of the standardized residual and its weights.
struct Coord {
    a: f64,
    da: f64,
    z: f64,
    dz: f64,
}

fn coords(
    part: &Participant,
    link: LinkFunction,
    theta: &DVector<f64>,
    dispersion: f64,
    idx: usize,
) -> Result<Vec<Coord>> {
    let eta = &part.x * theta;
    let mut out = Vec::with_capacity(eta.len());
    for (t, &e) in eta.iter().enumerate() {
        if !e.is_finite() {
            return Err(QifError::NonFinitePredictor { participant: idx });
        }
        let y = part.y[t];
        match link {
            LinkFunction::Identity => {
                let sd = dispersion.sqrt();
                out.push(Coord { a: 1.0 / sd, da: 0.0, z: (y - e) / sd, dz: -1.0 / sd });
            }
            LinkFunction::Logit => {
                let mu = link.forward(e);
                if !(mu > MEAN_GUARD && mu < 1.0 - MEAN_GUARD) {
                    return Err(QifError::DegenerateFit { participant: idx, mean: mu });
                }
                let v = mu * (1.0 - mu);
                let sv = v.sqrt();
                let z = (y - mu) / sv;
                let skew = 1.0 - 2.0 * mu;
                out.push(Coord { a: sv, da: 0.5 * sv * skew, z, dz: -sv - 0.5 * z * skew });
            }
        }
    }
    Ok(out)
}

/// ψ_i and, optionally, ∇_θ ψ_i for one participant.
fn participant_terms(
    part: &Participant,
    data: &SourceData,
    theta: &DVector<f64>,
    dispersion: f64,
    idx: usize,
    want_jac: bool,
) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
    let p = data.p();
    let basis = data.basis;
    let s_count = basis.size();
    let m = part.m();
    let cs = coords(part, data.link, theta, dispersion, idx)?;
    let z: Vec<f64> = cs.iter().map(|c| c.z).collect();

    let mut psi = DVector::zeros(p * s_count);
    let mut jac = want_jac.then(|| DMatrix::zeros(p * s_count, p));
    // diag(z') X, shared by every basis matrix.
    let dzx = want_jac.then(|| {
        let mut d = part.x.clone();
        for (mut row, c) in d.row_iter_mut().zip(&cs) {
            row.scale_mut(c.dz);
        }
        d
    });

    let mut w = vec![0.0; m];
    for s in 0..s_count {
        basis.apply(s, &z, &mut w);
        let weighted = DVector::from_iterator(m, (0..m).map(|t| cs[t].a * w[t]));
        psi.rows_mut(s * p, p).copy_from(&part.x.tr_mul(&weighted));

        if let (Some(jac), Some(dzx)) = (jac.as_mut(), dzx.as_ref()) {
            // X^T diag(a' ⊙ B z) X + X^T diag(a) B diag(z') X
            let mut left = part.x.clone();
            for ((mut row, c), wt) in left.row_iter_mut().zip(&cs).zip(&w) {
                row.scale_mut(c.da * wt);
            }
            let mut block = left.tr_mul(&part.x);
            let mut bdz = basis.apply_columns(s, dzx);
            for (mut row, c) in bdz.row_iter_mut().zip(&cs) {
                row.scale_mut(c.a);
            }
            block += part.x.tr_mul(&bdz);
            jac.view_mut((s * p, 0), (p, p)).copy_from(&block);
        }
    }
    Ok((psi, jac))
}

pub(crate) fn evaluate(data: &SourceData, theta: &DVector<f64>, dispersion: f64, want_jac: bool) -> Result<Evaluation> {
    if theta.len() != data.p() {
        return Err(QifError::Dimension(format!("theta has length {}, data has p = {}", theta.len(), data.p())));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(QifError::Dimension("theta has non-finite entries".into()));
    }
    let dim = data.moment_dim();
    let n = data.n() as f64;
    let mut psi = DVector::zeros(dim);
    let mut jac = want_jac.then(|| DMatrix::zeros(dim, data.p()));
    let mut per = Vec::with_capacity(data.n());
    for (i, part) in data.participants().iter().enumerate() {
        let (psi_i, jac_i) = participant_terms(part, data, theta, dispersion, i, want_jac)?;
        psi += &psi_i;
        if let (Some(acc), Some(j)) = (jac.as_mut(), jac_i) {
            *acc += j;
        }
        per.push(psi_i);
    }
    psi /= n;
    if let Some(j) = jac.as_mut() {
        *j /= n;
    }
    Ok(Evaluation { psi, per_participant: per, jacobian: jac })
}

/// Averaged extended score Ψ(θ) and the per-participant ψ_i(θ).
///
/// `dispersion` is the marginal variance used for the identity link; it is
/// ignored for the logit link, whose variance is μ(1−μ).
pub fn extended_score(data: &SourceData, theta: &DVector<f64>, dispersion: f64) -> Result<ScoreEval> {
    let e = evaluate(data, theta, dispersion, false)?;
    Ok(ScoreEval { psi: e.psi, per_participant: e.per_participant })
}

/// Analytic sensitivity `S = −∇_θ Ψ(θ)`, a (p·s)×p matrix.
pub fn sensitivity(data: &SourceData, theta: &DVector<f64>, dispersion: f64) -> Result<DMatrix<f64>> {
    let e = evaluate(data, theta, dispersion, true)?;
    Ok(-e.jacobian.expect("jacobian requested"))
}

/// `(1/n) Σ ψ_i ψ_iᵀ`.
pub fn moment_covariance(per_participant: &[DVector<f64>]) -> DMatrix<f64> {
    let dim = per_participant.first().map_or(0, |v| v.len());
    let mut c = DMatrix::zeros(dim, dim);
    for v in per_participant {
        c.syger(1.0, v, v, 1.0);
    }
    c.fill_upper_triangle_with_lower_triangle();
    c / per_participant.len() as f64
}

/// Inverse-application of a moment covariance, ridged when ill-conditioned.
pub(crate) struct MomentWeight {
    factor: Option<SpdFactor>,
    pub ridged: bool,
}

impl MomentWeight {
    pub fn new(c: &DMatrix<f64>) -> Self {
        let dim = c.nrows();
        let trace = c.trace();
        if trace <= 0.0 {
            // Every ψ_i vanished: the quadratic form is identically zero.
            return MomentWeight { factor: None, ridged: true };
        }
        let rcond = sym_rcond(c);
        let mut ridged = rcond < RIDGE_RCOND;
        let mut factor = if ridged { None } else { SpdFactor::new(c) };
        if factor.is_none() {
            ridged = true;
            let lambda = RIDGE_SCALE * trace / dim as f64;
            let mut r = c.clone();
            for i in 0..dim {
                r[(i, i)] += lambda;
            }
            factor = SpdFactor::new(&r);
        }
        MomentWeight { factor, ridged }
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.factor {
            Some(f) => f.solve_vec(v),
            None => DVector::zeros(v.len()),
        }
    }

    pub fn apply_mat(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.factor {
            Some(f) => f.solve(a),
            None => DMatrix::zeros(a.nrows(), a.ncols()),
        }
    }
}

/// Quadratic inference function value and its moment covariance.
#[derive(Debug, Clone)]
pub struct QifValue {
    pub q: f64,
    pub psi: DVector<f64>,
    pub c: DMatrix<f64>,
    /// The covariance was ill-conditioned and a ridge was added before inversion.
    pub ridged: bool,
}

pub(crate) fn check_sample(data: &SourceData) -> Result<()> {
    if data.n() < data.moment_dim() {
        return Err(QifError::InsufficientSample { n: data.n(), dim: data.moment_dim() });
    }
    Ok(())
}

/// `Q(θ) = n Ψᵀ C⁻¹ Ψ` with `C = (1/n) Σ ψ_i ψ_iᵀ` evaluated at the same θ.
pub fn qif_objective(data: &SourceData, theta: &DVector<f64>, dispersion: f64) -> Result<QifValue> {
    check_sample(data)?;
    let e = evaluate(data, theta, dispersion, false)?;
    let c = moment_covariance(&e.per_participant);
    let w = MomentWeight::new(&c);
    let q = (data.n() as f64 * e.psi.dot(&w.apply(&e.psi))).max(0.0);
    Ok(QifValue { q, psi: e.psi, c, ridged: w.ridged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BasisFamily, BasisSet};
    use crate::testutil::random_source;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Dense oracle: μ̇ᵀ D^{-1/2} B_s D^{-1/2} (y − μ) with explicit matrices.
    fn dense_psi(data: &SourceData, theta: &DVector<f64>, disp: f64) -> DVector<f64> {
        let p = data.p();
        let s_count = data.basis.size();
        let mut total = DVector::zeros(p * s_count);
        for part in data.participants() {
            let m = part.m();
            let eta = &part.x * theta;
            let mu = eta.map(|e| data.link.forward(e));
            let mut mu_dot = part.x.clone();
            let mut d_inv_half = DMatrix::zeros(m, m);
            for t in 0..m {
                mu_dot.row_mut(t).scale_mut(data.link.derivative(eta[t]));
                let var = match data.link {
                    LinkFunction::Identity => disp,
                    LinkFunction::Logit => mu[t] * (1.0 - mu[t]),
                };
                d_inv_half[(t, t)] = 1.0 / var.sqrt();
            }
            let resid = &part.y - &mu;
            for s in 0..s_count {
                let b = data.basis.dense(s, m);
                let block = mu_dot.transpose() * &d_inv_half * b * &d_inv_half * &resid;
                let mut seg = total.rows_mut(s * p, p);
                seg += block;
            }
        }
        total / data.n() as f64
    }

    fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (a - b).amax() / b.amax().max(1e-300)
    }

    #[test]
    fn matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for link in [LinkFunction::Identity, LinkFunction::Logit] {
            for fam in [BasisFamily::Independence, BasisFamily::Ar1, BasisFamily::Exchangeable] {
                let (data, theta) = random_source(&mut rng, 50, 4, 3, link, fam);
                let got = extended_score(&data, &theta, 1.7).unwrap().psi;
                let want = dense_psi(&data, &theta, 1.7);
                assert!(rel_err(&got, &want) < 1e-12, "{link:?} {fam:?}");
            }
        }
    }

    #[test]
    fn independence_identity_is_glm_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (data, _) = random_source(&mut rng, 30, 3, 2, LinkFunction::Identity, BasisFamily::Independence);
        let theta = DVector::zeros(2);
        let got = extended_score(&data, &theta, 1.0).unwrap().psi;
        let mut want = DVector::zeros(2);
        for part in data.participants() {
            want += part.x.tr_mul(&part.y);
        }
        want /= data.n() as f64;
        assert!(rel_err(&got, &want) < 1e-13);
    }

    #[test]
    fn ar1_pair_swaps_residuals() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let y = DVector::from_vec(vec![3.0, 5.0]);
        let data =
            SourceData::new(vec![Participant::new(y, x)], LinkFunction::Identity, BasisSet::new(BasisFamily::Ar1))
                .unwrap();
        let psi = extended_score(&data, &DVector::zeros(1), 1.0).unwrap().psi;
        assert_eq!(psi[0], 1.0 * 3.0 + 2.0 * 5.0);
        assert_eq!(psi[1], 1.0 * 5.0 + 2.0 * 3.0);
    }

    #[test]
    fn zero_residual_logit_gives_zero_score() {
        // y = μ(θ) is not binary, so construct through the unchecked path.
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, 1.0, -0.4, 1.0, 1.1]);
        let theta = DVector::from_vec(vec![0.3, -0.8]);
        let mu = (&x * &theta).map(|e| LinkFunction::Logit.forward(e));
        let data = SourceData {
            participants: vec![Participant::new(mu, x)],
            p: 2,
            link: LinkFunction::Logit,
            basis: BasisSet::new(BasisFamily::Ar1),
        };
        let psi = extended_score(&data, &theta, 1.0).unwrap().psi;
        assert!(psi.amax() < 1e-15);
    }

    #[test]
    fn degenerate_logit_mean_is_reported() {
        let x = DMatrix::from_element(2, 1, 1.0);
        let data = SourceData::new(
            vec![Participant::new(DVector::from_vec(vec![0.0, 1.0]), x)],
            LinkFunction::Logit,
            BasisSet::new(BasisFamily::Independence),
        )
        .unwrap();
        let err = extended_score(&data, &DVector::from_vec(vec![40.0]), 1.0);
        assert!(matches!(err, Err(QifError::DegenerateFit { participant: 0, .. })));
    }

    /// Central finite differences of Ψ, step 1e−6.
    fn fd_jacobian(data: &SourceData, theta: &DVector<f64>, disp: f64) -> DMatrix<f64> {
        let h = 1e-6;
        let mut jac = DMatrix::zeros(data.moment_dim(), data.p());
        for c in 0..data.p() {
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[c] += h;
            dn[c] -= h;
            let d = (extended_score(data, &up, disp).unwrap().psi - extended_score(data, &dn, disp).unwrap().psi)
                / (2.0 * h);
            jac.set_column(c, &d);
        }
        jac
    }

    #[test]
    fn sensitivity_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for link in [LinkFunction::Identity, LinkFunction::Logit] {
            for fam in [BasisFamily::Independence, BasisFamily::Ar1, BasisFamily::Exchangeable] {
                for m in [2, 5, 20] {
                    let (data, theta) = random_source(&mut rng, 40, m, 3, link, fam);
                    let s = sensitivity(&data, &theta, 0.8).unwrap();
                    let fd = -fd_jacobian(&data, &theta, 0.8);
                    let err = (&s - &fd).amax() / fd.amax();
                    assert!(err < 1e-5, "{link:?} {fam:?} m={m}: {err}");
                }
            }
        }
    }

    #[test]
    fn identity_independence_sensitivity_is_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (data, theta) = random_source(&mut rng, 25, 4, 3, LinkFunction::Identity, BasisFamily::Independence);
        let s = sensitivity(&data, &theta, 2.0).unwrap();
        let mut gram = DMatrix::zeros(3, 3);
        for part in data.participants() {
            gram += part.x.tr_mul(&part.x);
        }
        gram /= 25.0 * 2.0;
        assert!((&s - &gram).amax() < 1e-12);
        assert!(crate::linalg::min_eigenvalue(&s) >= -1e-12);
    }

    #[test]
    fn qif_zero_score_is_zero() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let parts = (0..3).map(|_| Participant::new(DVector::from_vec(vec![2.0, 2.0]), x.clone())).collect();
        let data = SourceData::new(parts, LinkFunction::Identity, BasisSet::new(BasisFamily::Independence)).unwrap();
        let v = qif_objective(&data, &DVector::from_vec(vec![2.0]), 1.0).unwrap();
        assert_eq!(v.q, 0.0);
    }

    #[test]
    fn qif_scalar_hand_computation() {
        // p = 1, s = 1, m = 1, x = 1, θ = 0, unit variance: ψ_i = y_i.
        let ys = [1.0, 2.0, 4.0];
        let parts = ys
            .iter()
            .map(|&y| Participant::new(DVector::from_vec(vec![y]), DMatrix::from_element(1, 1, 1.0)))
            .collect();
        let data = SourceData::new(parts, LinkFunction::Identity, BasisSet::new(BasisFamily::Independence)).unwrap();
        let v = qif_objective(&data, &DVector::zeros(1), 1.0).unwrap();
        // Ψ = 7/3, C = 21/3 = 7, Q = 3 · (49/9) / 7 = 7/3.
        assert!((v.q - 7.0 / 3.0).abs() < 1e-14);
        assert!((v.c[(0, 0)] - 7.0).abs() < 1e-14);
    }

    #[test]
    fn qif_rejects_small_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (data, theta) = random_source(&mut rng, 5, 3, 3, LinkFunction::Identity, BasisFamily::Ar1);
        assert!(matches!(qif_objective(&data, &theta, 1.0), Err(QifError::InsufficientSample { n: 5, dim: 6 })));
    }

    #[test]
    fn participant_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (data, theta) = random_source(&mut rng, 60, 5, 3, LinkFunction::Logit, BasisFamily::Exchangeable);
        let order: Vec<usize> = (0..60).rev().collect();
        let shuffled = data.permuted(&order);
        let a = qif_objective(&data, &theta, 1.0).unwrap();
        let b = qif_objective(&shuffled, &theta, 1.0).unwrap();
        assert!((a.q - b.q).abs() <= 1e-12 * a.q.abs().max(1.0));
        assert!((&a.psi - &b.psi).amax() < 1e-12);
        let sa = sensitivity(&data, &theta, 1.0).unwrap();
        let sb = sensitivity(&shuffled, &theta, 1.0).unwrap();
        assert!((&sa - &sb).amax() < 1e-12);
    }
}
