//! Condensed SQP subproblem for the shooting OCP.
//!
//! The pinning rows fix `dx₀, du₀`, and the linearized defects express every
//! `dx_k` as an affine function of the free controls `w = (du₁, …, du_{N−1})`.
//! The QP is solved over `w` only; defect multipliers are then recovered by a
//! backward sweep of the state stationarity conditions.

use super::OcpProblem;
use crate::linalg::Matrix;
use crate::scalar::Real;
use crate::solver::{BlockHessian, GoldfarbIdnani, QpError, QpPoint, QpProblem, QpStep, RangeRow, SparseRow};

#[derive(Clone, Copy)]
enum RowKind {
    Bound(usize),
    Accel(usize),
}

/// Affine map of the full-space step onto `w`: `d_v = offset + Σ coef·w`.
struct Maps<T> {
    m: usize,
    /// `dx_k = s[k] + S[k] w`, `S[k]` stored row-major 3×m.
    s: Vec<[T; 3]>,
    big_s: Vec<T>,
    du0: [T; 2],
}

impl<T: Real> Maps<T> {
    #[inline]
    fn srow(&self, k: usize, i: usize) -> &[T] {
        let base = (3 * k + i) * self.m;
        &self.big_s[base..base + self.m]
    }

    /// Columns of `w` that can influence state `k`.
    fn state_cols(k: usize) -> usize {
        if k == 0 {
            0
        } else {
            2 * (k - 1)
        }
    }

    /// Fills `offset` and row `r` of `mat` (width `cols`) for full variable `v`.
    fn variable(&self, v: usize, offset: &mut T, row: &mut [T]) {
        row.fill(T::zero());
        let k = v / 5;
        let c = v % 5;
        if c < 3 {
            *offset = self.s[k][c];
            let cols = Self::state_cols(k).min(row.len());
            row[..cols].copy_from_slice(&self.srow(k, c)[..cols]);
        } else if k == 0 {
            *offset = self.du0[c - 3];
        } else {
            *offset = T::zero();
            row[2 * (k - 1) + c - 3] = T::one();
        }
    }
}

pub(super) fn condensed_step<T: Real>(
    p: &OcpProblem<T>,
    pt: &QpPoint<'_, T>,
    hess: &BlockHessian<T>,
    qp: &mut GoldfarbIdnani<T>,
) -> Result<QpStep<T>, QpError> {
    let n = p.config.steps;
    let nv = 5 * n + 3;
    let m = 2 * (n - 1);
    let z = pt.z;
    let c = pt.equalities;
    let lin: Vec<_> = (0..n).map(|k| p.step(z, k)).collect();

    let mut maps = Maps { m, s: vec![[T::zero(); 3]; n + 1], big_s: vec![T::zero(); (n + 1) * 3 * m], du0: [-c[3], -c[4]] };
    maps.s[0] = [-c[0], -c[1], -c[2]];
    for k in 0..n {
        let (a, b) = (&lin[k].a, &lin[k].b);
        let cols = Maps::<T>::state_cols(k);
        for i in 0..3 {
            let mut acc = -c[5 + 3 * k + i];
            for j in 0..3 {
                acc += a[i][j] * maps.s[k][j];
            }
            if k == 0 {
                acc += b[i][0] * maps.du0[0] + b[i][1] * maps.du0[1];
            }
            maps.s[k + 1][i] = acc;
            let dst = (3 * (k + 1) + i) * m;
            for col in 0..cols {
                let mut v = T::zero();
                for j in 0..3 {
                    v += a[i][j] * maps.big_s[(3 * k + j) * m + col];
                }
                maps.big_s[dst + col] = v;
            }
            if k >= 1 {
                maps.big_s[dst + 2 * (k - 1)] += b[i][0];
                maps.big_s[dst + 2 * (k - 1) + 1] += b[i][1];
            }
        }
    }

    // Condensed Hessian and gradient, block by block.
    let mut h = Matrix::zeros(m, m);
    let mut lin_term = vec![T::zero(); m];
    for blk in 0..hess.num_blocks() {
        let off = hess.offset(blk);
        let bm = hess.block(blk);
        let nb = bm.rows();
        let mb = if blk == hess.num_blocks() - 1 { m } else { 2 * blk };
        if mb == 0 {
            continue;
        }
        let mut mm = Matrix::zeros(nb, mb);
        let mut sb = vec![T::zero(); nb];
        for r in 0..nb {
            maps.variable(off + r, &mut sb[r], mm.row_mut(r));
        }
        // P = B M, q = B s + g
        let mut pm = Matrix::zeros(nb, mb);
        let mut q = vec![T::zero(); nb];
        for r in 0..nb {
            let mut acc = pt.gradient[off + r];
            for t in 0..nb {
                let brt = bm[(r, t)];
                acc += brt * sb[t];
                if brt != T::zero() {
                    let src = mm.row(t);
                    let dst = pm.row_mut(r);
                    for col in 0..mb {
                        dst[col] += brt * src[col];
                    }
                }
            }
            q[r] = acc;
        }
        for r in 0..nb {
            let mr = mm.row(r);
            let pr = pm.row(r);
            for i in 0..mb {
                if mr[i] == T::zero() {
                    continue;
                }
                let hrow = h.row_mut(i);
                for j in 0..mb {
                    hrow[j] += mr[i] * pr[j];
                }
                lin_term[i] += mr[i] * q[r];
            }
        }
    }
    for i in 0..m {
        for j in 0..i {
            let avg = (h[(i, j)] + h[(j, i)]) * T::lit(0.5);
            h[(i, j)] = avg;
            h[(j, i)] = avg;
        }
    }

    let mut sub = QpProblem::new(h, lin_term);
    let mut kinds = Vec::new();
    // variable bounds for x_k, u_k with k >= 1
    for v in 5..nv {
        let (lo, hi) = (pt.lower[v], pt.upper[v]);
        if !(lo.is_finite() || hi.is_finite()) {
            continue;
        }
        let mut off = T::zero();
        let mut dense = vec![T::zero(); m];
        maps.variable(v, &mut off, &mut dense);
        let row = SparseRow::from_dense(&dense);
        let shift = z[v] + off;
        sub.ranges.push(RangeRow { row, lower: lo - shift, upper: hi - shift });
        kinds.push(RowKind::Bound(v));
    }
    let inv = T::one() / p.config.dt;
    for k in 0..n - 1 {
        for j in 0..2 {
            let r = 2 * k + j;
            let g = pt.inequalities[r];
            let (mut lo, mut hi) = (pt.ineq_lower[r] - g, pt.ineq_upper[r] - g);
            let row = if k == 0 {
                lo += maps.du0[j] * inv;
                hi += maps.du0[j] * inv;
                SparseRow::new(vec![(j, inv)])
            } else {
                SparseRow::new(vec![(2 * (k - 1) + j, -inv), (2 * k + j, inv)])
            };
            if lo.is_finite() || hi.is_finite() {
                sub.ranges.push(RangeRow { row, lower: lo, upper: hi });
                kinds.push(RowKind::Accel(r));
            }
        }
    }

    let sol = qp.solve(&sub)?;
    let w = &sol.x;

    let mut d = vec![T::zero(); nv];
    let mut scratch = vec![T::zero(); m];
    for (v, dv) in d.iter_mut().enumerate() {
        let mut off = T::zero();
        maps.variable(v, &mut off, &mut scratch);
        *dv = off + scratch.iter().zip(w).fold(T::zero(), |acc, (a, b)| acc + *a * *b);
    }
    let mut nu = vec![T::zero(); nv];
    let mut mu = vec![T::zero(); 2 * (n - 1)];
    for (kind, &mult) in kinds.iter().zip(&sol.range_multipliers) {
        match *kind {
            RowKind::Bound(v) => nu[v] = mult,
            RowKind::Accel(r) => mu[r] = mult,
        }
    }

    // t = B d + g + ν + J_inᵀ μ
    let mut t = vec![T::zero(); nv];
    hess.mul_vec(&d, &mut t);
    for v in 0..nv {
        t[v] += pt.gradient[v] + nu[v];
    }
    for k in 0..n - 1 {
        for j in 0..2 {
            let mm = mu[2 * k + j] * inv;
            t[5 * k + 3 + j] -= mm;
            t[5 * (k + 1) + 3 + j] += mm;
        }
    }
    let mut lambda = vec![T::zero(); 3 * n + 5];
    for i in 0..3 {
        lambda[5 + 3 * (n - 1) + i] = -t[5 * n + i];
    }
    for k in (1..n).rev() {
        let a = &lin[k].a;
        for j in 0..3 {
            let mut acc = -t[5 * k + j];
            for i in 0..3 {
                acc += a[i][j] * lambda[5 + 3 * k + i];
            }
            lambda[5 + 3 * (k - 1) + j] = acc;
        }
    }
    let (a0, b0) = (&lin[0].a, &lin[0].b);
    for j in 0..3 {
        let mut acc = -t[j];
        for i in 0..3 {
            acc += a0[i][j] * lambda[5 + i];
        }
        lambda[j] = acc;
    }
    for j in 0..2 {
        let mut acc = -t[3 + j];
        for i in 0..3 {
            acc += b0[i][j] * lambda[5 + i];
        }
        lambda[3 + j] = acc;
    }

    Ok(QpStep { step: d, eq_multipliers: lambda, ineq_multipliers: mu, bound_multipliers: nu })
}
