//! Block-diagonal damped BFGS approximation of the Lagrangian Hessian.

use crate::linalg::{cholesky_in_place, dot, symmetric_min_eigenvalue, Matrix};
use crate::scalar::Real;

/// Symmetric positive definite matrix stored as dense diagonal blocks over
/// contiguous variable ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockHessian<T> {
    blocks: Vec<Matrix<T>>,
    offsets: Vec<usize>,
    dim: usize,
    bs: Vec<T>,
    r: Vec<T>,
}

/// What the last update did to each block, summed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UpdateStats {
    pub updated: usize,
    pub damped: usize,
    pub skipped: usize,
    pub reset: usize,
    /// Blocks whose spectrum was shifted up to the floor.
    pub shifted: usize,
}

impl<T: Real> BlockHessian<T> {
    pub fn new(sizes: &[usize], scale: T) -> Self {
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut dim = 0;
        for &s in sizes {
            offsets.push(dim);
            dim += s;
        }
        let max = sizes.iter().copied().max().unwrap_or(0);
        Self {
            blocks: sizes.iter().map(|&s| Matrix::scaled_identity(s, scale)).collect(),
            offsets,
            dim,
            bs: vec![T::zero(); max],
            r: vec![T::zero(); max],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, b: usize) -> &Matrix<T> {
        &self.blocks[b]
    }

    pub fn offset(&self, b: usize) -> usize {
        self.offsets[b]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|m| m.rows()).collect()
    }

    pub fn has_layout(&self, sizes: &[usize]) -> bool {
        self.blocks.len() == sizes.len() && self.blocks.iter().zip(sizes).all(|(m, &s)| m.rows() == s)
    }

    pub fn reset(&mut self, scale: T) {
        for m in &mut self.blocks {
            let n = m.rows();
            *m = Matrix::scaled_identity(n, scale);
        }
    }

    pub fn to_dense(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.dim, self.dim);
        for (m, &o) in self.blocks.iter().zip(&self.offsets) {
            for i in 0..m.rows() {
                for j in 0..m.cols() {
                    out[(o + i, o + j)] = m[(i, j)];
                }
            }
        }
        out
    }

    /// `out = B x`.
    pub fn mul_vec(&self, x: &[T], out: &mut [T]) {
        for (m, &o) in self.blocks.iter().zip(&self.offsets) {
            let n = m.rows();
            m.mul_vec(&x[o..o + n], &mut out[o..o + n]);
        }
    }

    pub fn min_eigenvalue(&self) -> T {
        self.blocks.iter().map(symmetric_min_eigenvalue).fold(T::infinity(), T::min)
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        self.blocks.iter().all(|m| m.asymmetry() <= tol)
    }

    /// Powell-damped BFGS update of each block with its slice of `s` and `y`.
    /// A block whose update would leave `B - floor·I` without a Cholesky
    /// factor is reset to a scaled identity.
    pub fn update(&mut self, s: &[T], y: &[T], floor: T) -> UpdateStats {
        let mut stats = UpdateStats::default();
        let two_tenths = T::lit(0.2);
        for b in 0..self.blocks.len() {
            let o = self.offsets[b];
            let n = self.blocks[b].rows();
            let sb = &s[o..o + n];
            let yb = &y[o..o + n];
            if sb.iter().chain(yb).any(|v| !v.is_finite()) {
                stats.skipped += 1;
                continue;
            }
            let m = &self.blocks[b];
            m.mul_vec(sb, &mut self.bs[..n]);
            let sbs = dot(sb, &self.bs[..n]);
            let ss = dot(sb, sb);
            if ss == T::zero() || sbs <= T::eps() * T::eps() * T::lit(1e4) {
                stats.skipped += 1;
                continue;
            }
            let sy = dot(sb, yb);
            if sy >= two_tenths * sbs {
                self.r[..n].copy_from_slice(yb);
            } else {
                let theta = T::lit(0.8) * sbs / (sbs - sy);
                for i in 0..n {
                    self.r[i] = theta * yb[i] + (T::one() - theta) * self.bs[i];
                }
                stats.damped += 1;
            }
            let sr = dot(sb, &self.r[..n]);
            let m = &mut self.blocks[b];
            for i in 0..n {
                for j in 0..n {
                    m[(i, j)] += self.r[i] * self.r[j] / sr - self.bs[i] * self.bs[j] / sbs;
                }
            }
            for i in 0..n {
                for j in 0..i {
                    let avg = (m[(i, j)] + m[(j, i)]) * T::lit(0.5);
                    m[(i, j)] = avg;
                    m[(j, i)] = avg;
                }
            }
            let mut probe = m.clone();
            for i in 0..n {
                probe[(i, i)] -= floor;
            }
            let mut ok = m.is_finite() && cholesky_in_place(&mut probe);
            if !ok && m.is_finite() {
                // lift the smallest eigenvalue back above the floor rather
                // than discarding the accumulated curvature
                let lift = floor * T::lit(2.0) - symmetric_min_eigenvalue(m);
                for i in 0..n {
                    m[(i, i)] += lift;
                }
                probe = m.clone();
                for i in 0..n {
                    probe[(i, i)] -= floor;
                }
                ok = cholesky_in_place(&mut probe);
                stats.shifted += ok as usize;
            }
            if ok {
                stats.updated += 1;
            } else {
                let scale = (dot(&self.r[..n], &self.r[..n]) / sr).max(floor * T::lit(10.0)).max(T::eps());
                let scale = if scale.is_finite() { scale } else { T::one() };
                *m = Matrix::scaled_identity(n, scale);
                stats.reset += 1;
            }
        }
        stats
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn secant_condition_on_curved_pairs() {
        let mut h = BlockHessian::<f64>::new(&[2, 3], 1.0);
        let s = [0.1, -0.2, 0.3, 0.05, -0.1];
        // y = A s with SPD A
        let y = [0.4, -0.5, 0.9, 0.1, -0.3];
        let st = h.update(&s, &y, 1e-8);
        assert_eq!(st.updated, 2);
        let mut bs = [0.0; 5];
        h.mul_vec(&s, &mut bs);
        for i in 0..5 {
            assert!((bs[i] - y[i]).abs() < 1e-12, "{bs:?}");
        }
    }

    #[test]
    fn damping_keeps_negative_curvature_out() {
        let mut h = BlockHessian::<f64>::new(&[2], 1.0);
        let st = h.update(&[1.0, 0.0], &[-5.0, 0.0], 1e-8);
        assert_eq!(st.damped, 1);
        assert!(h.min_eigenvalue() > 0.0);
    }

    #[test]
    fn zero_step_is_skipped() {
        let mut h = BlockHessian::<f64>::new(&[3], 2.0);
        let before = h.clone();
        let st = h.update(&[0.0; 3], &[1.0, 2.0, 3.0], 1e-8);
        assert_eq!(st.skipped, 1);
        assert_eq!(h, before);
    }

    proptest! {
        #[test]
        fn stays_symmetric_positive_definite(
            pairs in prop::collection::vec((prop::array::uniform5(-1.0f64..1.0), prop::array::uniform5(-10.0f64..10.0)), 1..40)
        ) {
            let floor = 1e-8;
            let mut h = BlockHessian::<f64>::new(&[2, 3], 1.0);
            for (s, y) in &pairs {
                h.update(s, y, floor);
                prop_assert!(h.is_symmetric(1e-9));
                prop_assert!(h.min_eigenvalue() >= floor * 0.5);
            }
        }
    }
}
