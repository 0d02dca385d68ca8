//! Per-source QIF minimization.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::score::{check_sample, evaluate, moment_covariance, MomentWeight};
use super::{LinkFunction, SourceData};
use crate::error::{QifError, Result};
use crate::linalg::spd_solve;

/// Gauss-Newton controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverControl {
    pub max_iter: usize,
    /// Tolerance on the ∞-norm of ∇(Q/n).
    pub grad_tol: f64,
    pub max_halvings: usize,
}

impl Default for SolverControl {
    fn default() -> Self {
        SolverControl { max_iter: 100, grad_tol: 1e-8, max_halvings: 20 }
    }
}

/// Output of [`fit_source`].
#[derive(Debug, Clone)]
pub struct SourceFit {
    pub theta_hat: DVector<f64>,
    /// `−∇Ψ` at `theta_hat`, (p·s)×p.
    pub s_hat: DMatrix<f64>,
    /// ψ_i(θ̂) for every participant, in data order.
    pub psi_at_fit: Vec<DVector<f64>>,
    pub q_value: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    /// Marginal variance used for the identity link (1 for logit).
    pub dispersion: f64,
    /// The moment covariance needed a ridge at some point.
    pub ridged: bool,
}

impl SourceFit {
    pub fn n(&self) -> usize {
        self.psi_at_fit.len()
    }

    pub fn p(&self) -> usize {
        self.theta_hat.len()
    }

    pub fn moment_dim(&self) -> usize {
        self.s_hat.nrows()
    }

    /// Mean of the archived ψ_i, i.e. Ψ(θ̂).
    pub fn psi_bar(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.moment_dim());
        for v in &self.psi_at_fit {
            acc += v;
        }
        acc / self.n() as f64
    }

    /// `(1/n) Σ ψ_i ψ_iᵀ` at the fit.
    pub fn moment_covariance(&self) -> DMatrix<f64> {
        moment_covariance(&self.psi_at_fit)
    }
}

/// Independence-working GLM on the stacked rows: OLS for the identity link,
/// IRLS for the logit link. Returns the coefficients and, for the identity
/// link, the residual variance.
pub fn independence_glm(data: &SourceData) -> Result<(DVector<f64>, f64)> {
    let p = data.p();
    match data.link {
        LinkFunction::Identity => {
            let mut xtx = DMatrix::zeros(p, p);
            let mut xty = DVector::zeros(p);
            for part in data.participants() {
                xtx += part.x.tr_mul(&part.x);
                xty += part.x.tr_mul(&part.y);
            }
            let theta = spd_solve(&xtx, &xty).ok_or(QifError::SingularStep { iteration: 0 })?;
            let mut rss = 0.0;
            for part in data.participants() {
                rss += (&part.y - &part.x * &theta).norm_squared();
            }
            let dof = data.total_rows().saturating_sub(p).max(1) as f64;
            let mut sigma2 = rss / dof;
            if !(sigma2.is_finite() && sigma2 > 0.0) {
                // Noiseless data: any scale gives the same minimizer.
                sigma2 = 1.0;
            }
            Ok((theta, sigma2))
        }
        LinkFunction::Logit => {
            let mut theta = DVector::zeros(p);
            for _ in 0..50 {
                let mut info = DMatrix::zeros(p, p);
                let mut score = DVector::zeros(p);
                for part in data.participants() {
                    let eta = &part.x * &theta;
                    for t in 0..part.m() {
                        let mu = data.link.forward(eta[t]);
                        let w = (mu * (1.0 - mu)).max(1e-300);
                        let row = part.x.row(t).transpose();
                        info.syger(w, &row, &row, 1.0);
                        score.axpy(part.y[t] - mu, &row, 1.0);
                    }
                }
                info.fill_upper_triangle_with_lower_triangle();
                let step = spd_solve(&info, &score).ok_or(QifError::SingularStep { iteration: 0 })?;
                theta += &step;
                if theta.iter().any(|v| !v.is_finite()) {
                    return Err(QifError::NonFinitePredictor { participant: 0 });
                }
                if step.amax() < 1e-10 * (1.0 + theta.amax()) {
                    break;
                }
            }
            Ok((theta, 1.0))
        }
    }
}

struct Iterate {
    theta: DVector<f64>,
    q: f64,
    grad: f64,
}

/// Minimizes `Q(θ) = n Ψᵀ C⁻¹ Ψ` by Gauss-Newton with step halving.
///
/// `C` is refreshed at every iterate and treated as constant when forming the
/// step, so the update solves `(SᵀC⁻¹S) δ = SᵀC⁻¹Ψ`. A step is halved while
/// it increases the quadratic form built with the current `C`.
pub fn fit_source(data: &SourceData, init: Option<&DVector<f64>>, ctrl: &SolverControl) -> Result<SourceFit> {
    check_sample(data)?;
    let (glm, dispersion) = independence_glm(data)?;
    let mut theta = match init {
        Some(t) => {
            if t.len() != data.p() {
                return Err(QifError::Dimension(format!("init has length {}, expected {}", t.len(), data.p())));
            }
            t.clone()
        }
        None => glm,
    };
    let n = data.n() as f64;
    let mut best: Option<Iterate> = None;
    let mut ridged = false;
    let mut iterations = 0;
    let mut converged = false;

    for iter in 0..=ctrl.max_iter {
        let eval = evaluate(data, &theta, dispersion, true)?;
        let c = moment_covariance(&eval.per_participant);
        let weight = MomentWeight::new(&c);
        ridged |= weight.ridged;
        let s = -eval.jacobian.expect("jacobian requested");
        let w_psi = weight.apply(&eval.psi);
        let q = (n * eval.psi.dot(&w_psi)).max(0.0);
        // ∇(Q/n) = −2 Sᵀ C⁻¹ Ψ
        let grad = (s.tr_mul(&w_psi) * -2.0).amax();
        if best.as_ref().is_none_or(|b| q < b.q || (q == b.q && grad < b.grad)) {
            best = Some(Iterate { theta: theta.clone(), q, grad });
        }
        if grad < ctrl.grad_tol {
            converged = true;
            best = Some(Iterate { theta: theta.clone(), q, grad });
            break;
        }
        if iter == ctrl.max_iter {
            break;
        }
        let ws = weight.apply_mat(&s);
        let mut h = s.tr_mul(&ws);
        h.fill_upper_triangle_with_lower_triangle();
        let step = spd_solve(&h, &s.tr_mul(&w_psi)).ok_or(QifError::SingularStep { iteration: iter })?;

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=ctrl.max_halvings {
            let trial = &theta + &step * scale;
            match evaluate(data, &trial, dispersion, false) {
                Ok(e) => {
                    let q_trial = n * e.psi.dot(&weight.apply(&e.psi));
                    if q_trial <= q {
                        accepted = Some(trial);
                        break;
                    }
                }
                // Leaving the admissible region counts as an increase.
                Err(QifError::DegenerateFit { .. }) | Err(QifError::NonFinitePredictor { .. }) => {}
                Err(e) => return Err(e),
            }
            scale *= 0.5;
        }
        match accepted {
            Some(t) => {
                theta = t;
                iterations += 1;
            }
            None => break,
        }
    }

    let best = best.expect("at least one iterate evaluated");
    let eval = evaluate(data, &best.theta, dispersion, true)?;
    let c = moment_covariance(&eval.per_participant);
    let weight = MomentWeight::new(&c);
    ridged |= weight.ridged;
    let q_value = (n * eval.psi.dot(&weight.apply(&eval.psi))).max(0.0);
    Ok(SourceFit {
        theta_hat: best.theta,
        s_hat: -eval.jacobian.expect("jacobian requested"),
        psi_at_fit: eval.per_participant,
        q_value,
        converged,
        iterations,
        gradient_norm: best.grad,
        dispersion,
        ridged,
    })
}
