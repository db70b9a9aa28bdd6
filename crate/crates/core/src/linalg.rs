//! Minimal dense linear algebra over [`Real`] scalars.
//!
//! Only what the QP and SQP layers need: row-major matrices, Cholesky
//! factorization, triangular solves and Givens rotations.

use std::ops::{Index, IndexMut};

use crate::scalar::Real;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, T::one())
    }

    pub fn scaled_identity(n: usize, scale: T) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = scale;
        }
        m
    }

    pub fn from_rows(rows: &[&[T]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut m = Self::zeros(r, c);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), c, "ragged rows");
            m.row_mut(i).copy_from_slice(row);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// `out = self * x`
    pub fn mul_vec(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(i), x);
        }
    }

    /// `out += selfᵀ * y`
    pub fn add_transpose_mul_vec(&self, y: &[T], out: &mut [T]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (i, &yi) in y.iter().enumerate() {
            if yi == T::zero() {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * yi;
            }
        }
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute asymmetry `|a_ij - a_ji|`.
    pub fn asymmetry(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub fn norm_inf<T: Real>(a: &[T]) -> T {
    a.iter().fold(T::zero(), |acc, v| acc.max(v.abs()))
}

#[inline]
pub fn norm1<T: Real>(a: &[T]) -> T {
    a.iter().fold(T::zero(), |acc, v| acc + v.abs())
}

/// In-place Cholesky factorization `A = L Lᵀ`. On success the lower
/// triangle holds `L` and the strict upper triangle is zeroed.
/// Returns `false` when `A` is not numerically positive definite.
pub fn cholesky_in_place<T: Real>(a: &mut Matrix<T>) -> bool {
    let n = a.rows();
    debug_assert_eq!(n, a.cols());
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= a[(j, k)] * a[(j, k)];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= a[(i, k)] * a[(j, k)];
            }
            a[(i, j)] = s / d;
        }
        for i in 0..j {
            a[(i, j)] = T::zero();
        }
    }
    true
}

/// Solves `L y = b` in place for lower-triangular `L`.
pub fn solve_lower_in_place<T: Real>(l: &Matrix<T>, b: &mut [T]) {
    for i in 0..b.len() {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * b[k];
        }
        b[i] = s / l[(i, i)];
    }
}

/// Solves `Lᵀ x = b` in place for lower-triangular `L`.
pub fn solve_lower_transpose_in_place<T: Real>(l: &Matrix<T>, b: &mut [T]) {
    for i in (0..b.len()).rev() {
        let mut s = b[i];
        for k in (i + 1)..b.len() {
            s -= l[(k, i)] * b[k];
        }
        b[i] = s / l[(i, i)];
    }
}

/// Solves `A x = b` given the Cholesky factor of `A`.
pub fn cholesky_solve<T: Real>(l: &Matrix<T>, b: &mut [T]) {
    solve_lower_in_place(l, b);
    solve_lower_transpose_in_place(l, b);
}

/// Computes a Givens rotation `(c, s)` with `[c s; -s c]ᵀ`-style action
/// mapping `(a, b)` to `(r, 0)`; returns `(c, s, r)`.
#[inline]
pub fn givens<T: Real>(a: T, b: T) -> (T, T, T) {
    if b == T::zero() {
        return (T::one(), T::zero(), a);
    }
    let r = a.hypot(b);
    (a / r, b / r, r)
}

/// Smallest eigenvalue of a symmetric matrix via cyclic Jacobi sweeps.
/// Intended for small matrices in diagnostics and tests.
pub fn symmetric_min_eigenvalue<T: Real>(m: &Matrix<T>) -> T {
    let n = m.rows();
    let mut a = m.clone();
    for _sweep in 0..100 {
        let mut off = T::zero();
        for i in 0..n {
            for j in 0..i {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() <= T::eps() * T::lit(1e-2) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[(i, i)]).fold(T::infinity(), T::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solves_spd_system() {
        let a = Matrix::<f64>::from_rows(&[&[4.0, 2.0, 0.6], &[2.0, 5.0, 1.0], &[0.6, 1.0, 3.0]]);
        let mut l = a.clone();
        assert!(cholesky_in_place(&mut l));
        let x_true = [1.0, -2.0, 0.5];
        let mut b = [0.0; 3];
        a.mul_vec(&x_true, &mut b);
        cholesky_solve(&l, &mut b);
        for (x, t) in b.iter().zip(x_true) {
            assert!((x - t).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let mut a = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]);
        assert!(!cholesky_in_place(&mut a));
    }

    #[test]
    fn jacobi_min_eigenvalue() {
        let a = Matrix::<f64>::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]);
        assert!((symmetric_min_eigenvalue(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn givens_zeroes_second_component() {
        let (c, s, r) = givens(3.0_f64, 4.0);
        assert!((r - 5.0).abs() < 1e-15);
        assert!((-s * 3.0 + c * 4.0).abs() < 1e-15);
    }
}
