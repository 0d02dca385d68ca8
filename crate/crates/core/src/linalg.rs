//! Small dense linear-algebra helpers shared by the fitting and combining code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

/// Cholesky factor together with a cheap reciprocal condition estimate.
#[derive(Clone, Debug)]
pub(crate) struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    pub rcond: f64,
}

impl SpdFactor {
    /// Factorizes a symmetric positive definite matrix. Returns `None` when the
    /// factorization breaks down.
    pub fn new(a: &DMatrix<f64>) -> Option<Self> {
        let chol = Cholesky::new(a.clone())?;
        let l = chol.l_dirty();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..l.nrows() {
            let d = l[(i, i)].abs();
            lo = lo.min(d);
            hi = hi.max(d);
        }
        let rcond = if hi > 0.0 { (lo / hi).powi(2) } else { 0.0 };
        Some(SpdFactor { chol, rcond })
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// Solves `L x = b` with the lower factor, so that `xᵀx = bᵀ A⁻¹ b`.
    pub fn whiten(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut out);
        out
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// Maximum absolute entry of `a - aᵀ`.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..a.nrows() {
        for j in 0..i {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let mut s = a.clone();
    symmetrize(&mut s);
    SymmetricEigen::new(s).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Eigen-based reciprocal condition number of a symmetric PSD matrix.
pub fn sym_rcond(a: &DMatrix<f64>) -> f64 {
    let mut s = a.clone();
    symmetrize(&mut s);
    let ev = SymmetricEigen::new(s).eigenvalues;
    let hi = ev.iter().copied().fold(0.0f64, |m, v| m.max(v.abs()));
    let lo = ev.iter().copied().fold(f64::INFINITY, f64::min);
    if hi == 0.0 {
        0.0
    } else {
        (lo / hi).max(0.0)
    }
}

/// Solves `a x = b` for a symmetric positive definite `a` via Cholesky.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    SpdFactor::new(a).map(|f| f.solve_vec(b))
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    SpdFactor::new(a).map(|f| f.inverse())
}
