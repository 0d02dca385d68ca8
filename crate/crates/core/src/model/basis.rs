//! Working-correlation basis matrices.
//!
//! Each family is a short list of symmetric 0/1 matrices. They are applied
//! structurally in O(m) so that long outcome vectors never need a dense m×m
//! matrix; [`BasisSet::dense`] exists for oracles and tests.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisFamily {
    Independence,
    Ar1,
    Exchangeable,
}

impl BasisFamily {
    pub fn code(self) -> u8 {
        match self {
            BasisFamily::Independence => 0,
            BasisFamily::Ar1 => 1,
            BasisFamily::Exchangeable => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(BasisFamily::Independence),
            1 => Some(BasisFamily::Ar1),
            2 => Some(BasisFamily::Exchangeable),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSet {
    pub family: BasisFamily,
}

impl BasisSet {
    pub fn new(family: BasisFamily) -> Self {
        BasisSet { family }
    }

    /// Number of basis matrices `s`.
    pub fn size(&self) -> usize {
        match self.family {
            BasisFamily::Independence => 1,
            BasisFamily::Ar1 | BasisFamily::Exchangeable => 2,
        }
    }

    /// Writes `B_index · v` into `out`. `index` is zero-based.
    pub fn apply(&self, index: usize, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), out.len());
        debug_assert!(index < self.size());
        let m = v.len();
        if index == 0 {
            out.copy_from_slice(v);
            return;
        }
        match self.family {
            BasisFamily::Independence => unreachable!("independence basis has a single matrix"),
            BasisFamily::Ar1 => {
                for t in 0..m {
                    let lo = if t > 0 { v[t - 1] } else { 0.0 };
                    let hi = if t + 1 < m { v[t + 1] } else { 0.0 };
                    out[t] = lo + hi;
                }
            }
            BasisFamily::Exchangeable => {
                let total: f64 = v.iter().sum();
                for t in 0..m {
                    out[t] = total - v[t];
                }
            }
        }
    }

    /// Applies `B_index` to every column of an m×p matrix.
    pub fn apply_columns(&self, index: usize, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(a.nrows(), a.ncols());
        for c in 0..a.ncols() {
            let col = a.column(c);
            let src: Vec<f64> = col.iter().copied().collect();
            let mut dst = vec![0.0; src.len()];
            self.apply(index, &src, &mut dst);
            out.column_mut(c).copy_from(&DVector::from_vec(dst));
        }
        out
    }

    /// Dense `B_index` of dimension m.
    pub fn dense(&self, index: usize, m: usize) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(m, m);
        for c in 0..m {
            let mut e = vec![0.0; m];
            e[c] = 1.0;
            let mut col = vec![0.0; m];
            self.apply(index, &e, &mut col);
            for r in 0..m {
                b[(r, c)] = col[r];
            }
        }
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_sizes() {
        assert_eq!(BasisSet::new(BasisFamily::Independence).size(), 1);
        assert_eq!(BasisSet::new(BasisFamily::Ar1).size(), 2);
        assert_eq!(BasisSet::new(BasisFamily::Exchangeable).size(), 2);
    }

    #[test]
    fn dense_matrices_are_symmetric_zero_one() {
        for fam in [BasisFamily::Independence, BasisFamily::Ar1, BasisFamily::Exchangeable] {
            let basis = BasisSet::new(fam);
            for s in 0..basis.size() {
                for m in [1, 2, 5] {
                    let b = basis.dense(s, m);
                    assert_eq!(b, b.transpose());
                    assert!(b.iter().all(|&x| x == 0.0 || x == 1.0));
                }
            }
            assert_eq!(basis.dense(0, 4), DMatrix::identity(4, 4));
        }
    }

    #[test]
    fn second_matrices_match_definitions() {
        let ar = BasisSet::new(BasisFamily::Ar1).dense(1, 4);
        for r in 0..4usize {
            for c in 0..4 {
                let expect = if r.abs_diff(c) == 1 { 1.0 } else { 0.0 };
                assert_eq!(ar[(r, c)], expect);
            }
        }
        let ex = BasisSet::new(BasisFamily::Exchangeable).dense(1, 3);
        assert_eq!(ex, DMatrix::from_element(3, 3, 1.0) - DMatrix::identity(3, 3));
        // m = 2: the AR(1) second matrix swaps the two entries.
        let mut out = [0.0; 2];
        BasisSet::new(BasisFamily::Ar1).apply(1, &[3.0, -7.0], &mut out);
        assert_eq!(out, [-7.0, 3.0]);
    }
}
