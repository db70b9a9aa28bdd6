//! Dense strictly convex QP solver (Goldfarb–Idnani dual active set).
//!
//! Solves `min ½ xᵀ G x + gᵀ x` subject to sparse equality rows and two-sided
//! range rows. The method starts from the unconstrained minimizer and adds
//! the most violated constraint each outer pass, so it needs no feasible
//! starting point and its pivoting is fully deterministic.

use thiserror::Error;

use crate::linalg::{cholesky_in_place, givens, Matrix};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("QP Hessian is not positive definite")]
    NotConvex,
    #[error("QP constraints are infeasible")]
    Infeasible,
    #[error("equality constraints are linearly dependent and inconsistent")]
    DependentEqualities,
    #[error("QP active-set iteration limit reached")]
    IterationLimit,
    #[error("QP data contains non-finite values")]
    NonFinite,
}

/// Sparse linear form `aᵀx` stored as `(index, coefficient)` pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseRow<T> {
    pub entries: Vec<(usize, T)>,
}

impl<T: Real> SparseRow<T> {
    pub fn new(entries: Vec<(usize, T)>) -> Self {
        Self { entries }
    }

    pub fn unit(index: usize) -> Self {
        Self { entries: vec![(index, T::one())] }
    }

    /// Row from a dense slice, keeping nonzeros only.
    pub fn from_dense(dense: &[T]) -> Self {
        Self { entries: dense.iter().enumerate().filter(|(_, v)| **v != T::zero()).map(|(i, v)| (i, *v)).collect() }
    }

    #[inline]
    pub fn dot(&self, x: &[T]) -> T {
        self.entries.iter().fold(T::zero(), |acc, &(i, a)| acc + a * x[i])
    }

    pub fn norm_sq(&self) -> T {
        self.entries.iter().fold(T::zero(), |acc, &(_, a)| acc + a * a)
    }
}

/// `lower <= aᵀx <= upper`; either side may be infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeRow<T> {
    pub row: SparseRow<T>,
    pub lower: T,
    pub upper: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem<T> {
    pub hessian: Matrix<T>,
    pub linear: Vec<T>,
    /// Rows `aᵀx = b`.
    pub equalities: Vec<(SparseRow<T>, T)>,
    pub ranges: Vec<RangeRow<T>>,
}

impl<T: Real> QpProblem<T> {
    pub fn new(hessian: Matrix<T>, linear: Vec<T>) -> Self {
        Self { hessian, linear, equalities: Vec::new(), ranges: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }
}

/// Primal solution and multipliers, with the sign convention
/// `G x + g + Σ λ_i e_i + Σ μ_j a_j = 0`; `μ_j > 0` marks an active upper
/// side and `μ_j < 0` an active lower side.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution<T> {
    pub x: Vec<T>,
    pub eq_multipliers: Vec<T>,
    pub range_multipliers: Vec<T>,
    pub active_set_changes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Side {
    Equality(usize),
    Lower(usize),
    Upper(usize),
}

/// Rotates the column pair `(a, b)` in place: `a ← c·a + s·b`, `b ← c·b − s·a`.
#[inline]
fn rotate<T: Real>(a: &mut [T], b: &mut [T], c: T, s: T) {
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (p, q) = (*x, *y);
        *x = c * p + s * q;
        *y = c * q - s * p;
    }
}

/// Reusable Goldfarb–Idnani solver with its factorization buffers.
#[derive(Debug, Clone, Default)]
pub struct GoldfarbIdnani<T> {
    /// `J` stored column-major: column `k` is `j[k·n .. (k+1)·n]`.
    j: Vec<T>,
    r: Vec<T>,
    n: usize,
    d: Vec<T>,
    z: Vec<T>,
    rv: Vec<T>,
    x: Vec<T>,
    active: Vec<Side>,
    u: Vec<T>,
    is_active: Vec<[bool; 2]>,
    /// Active inequality sides of the previous solve, when warm starting.
    warm: Option<Vec<Side>>,
}

impl<T: Real> GoldfarbIdnani<T> {
    pub fn new() -> Self {
        Self {
            j: Vec::new(),
            r: Vec::new(),
            n: 0,
            d: Vec::new(),
            z: Vec::new(),
            rv: Vec::new(),
            x: Vec::new(),
            active: Vec::new(),
            u: Vec::new(),
            is_active: Vec::new(),
            warm: None,
        }
    }

    /// A solver that seeds each solve with the previous active set. Worth it
    /// for sequences of closely related QPs; the result does not depend on
    /// the guess, only the number of active-set changes does.
    pub fn with_warm_start() -> Self {
        Self { warm: Some(Vec::new()), ..Self::new() }
    }

    /// Mutable columns `k` and `k + 1`.
    #[inline]
    fn col_pair(&mut self, k: usize) -> (&mut [T], &mut [T]) {
        let n = self.n;
        let (a, b) = self.j[k * n..(k + 2) * n].split_at_mut(n);
        (a, b)
    }

    fn normal<'a>(qp: &'a QpProblem<T>, side: Side) -> (&'a SparseRow<T>, T, T) {
        // (row, sign, rhs) such that constraint reads sign * aᵀx >= rhs
        match side {
            Side::Equality(i) => (&qp.equalities[i].0, T::one(), qp.equalities[i].1),
            Side::Lower(i) => (&qp.ranges[i].row, T::one(), qp.ranges[i].lower),
            Side::Upper(i) => (&qp.ranges[i].row, -T::one(), -qp.ranges[i].upper),
        }
    }

    /// `d = Jᵀ n`, `z = J₂ d₂`, `r = R⁻¹ d₁`; returns `zᵀ n`.
    fn directions(&mut self, row: &SparseRow<T>, sign: T) -> T {
        let n = self.n;
        let q = self.active.len();
        for k in 0..n {
            let col = &self.j[k * n..(k + 1) * n];
            self.d[k] = row.entries.iter().fold(T::zero(), |acc, &(i, a)| acc + a * col[i]) * sign;
        }
        self.z.fill(T::zero());
        for k in q..n {
            let dk = self.d[k];
            let col = &self.j[k * n..(k + 1) * n];
            for (z, &c) in self.z.iter_mut().zip(col) {
                *z += c * dk;
            }
        }
        for i in (0..q).rev() {
            let ri = &self.r[i * n..(i + 1) * n];
            let acc = (i + 1..q).fold(self.d[i], |acc, k| acc - ri[k] * self.rv[k]);
            self.rv[i] = acc / ri[i];
        }
        row.entries.iter().fold(T::zero(), |acc, &(i, a)| acc + sign * a * self.z[i])
    }

    /// Appends a constraint to the factorization using the current `d`.
    fn add_constraint(&mut self, side: Side, multiplier: T) {
        let n = self.n;
        let q = self.active.len();
        for col in ((q + 1)..n).rev() {
            let (c, s, rr) = givens(self.d[col - 1], self.d[col]);
            if s == T::zero() {
                continue;
            }
            self.d[col - 1] = rr;
            self.d[col] = T::zero();
            let (a, b) = self.col_pair(col - 1);
            rotate(a, b, c, s);
        }
        for i in 0..=q {
            self.r[i * n + q] = self.d[i];
        }
        self.active.push(side);
        self.u.push(multiplier);
        self.mark(side, true);
    }

    fn mark(&mut self, side: Side, on: bool) {
        match side {
            Side::Equality(_) => {}
            Side::Lower(i) => self.is_active[i][0] = on,
            Side::Upper(i) => self.is_active[i][1] = on,
        }
    }

    /// Removes the active constraint at position `k`.
    fn drop_constraint(&mut self, k: usize) {
        let n = self.n;
        let q = self.active.len();
        let side = self.active.remove(k);
        self.u.remove(k);
        self.mark(side, false);
        // shift R columns left
        for col in k..(q - 1) {
            for i in 0..=(col + 1).min(q - 1) {
                self.r[i * n + col] = self.r[i * n + col + 1];
            }
        }
        for i in 0..q {
            self.r[i * n + q - 1] = T::zero();
        }
        // restore triangularity with rotations on rows (col, col + 1)
        for col in k..(q - 1) {
            let (c, s, rr) = givens(self.r[col * n + col], self.r[(col + 1) * n + col]);
            if s == T::zero() {
                continue;
            }
            self.r[col * n + col] = rr;
            self.r[(col + 1) * n + col] = T::zero();
            for cc in (col + 1)..(q - 1) {
                let a = self.r[col * n + cc];
                let b = self.r[(col + 1) * n + cc];
                self.r[col * n + cc] = c * a + s * b;
                self.r[(col + 1) * n + cc] = -s * a + c * b;
            }
            let (a, b) = self.col_pair(col);
            rotate(a, b, c, s);
        }
        for cc in 0..n {
            self.r[(q - 1) * n + cc] = T::zero();
        }
    }

    /// Forces the guessed sides active with full steps, then drops sides
    /// with negative multipliers until the basis is dual feasible again,
    /// which is all the main loop needs. Returns the number of changes.
    fn seed_active_set(&mut self, qp: &QpProblem<T>, guess: &[Side], tiny: T) -> usize {
        let n = self.n;
        let mut changes = 0;
        for &side in guess {
            let (i, k) = match side {
                Side::Lower(i) => (i, 0),
                Side::Upper(i) => (i, 1),
                Side::Equality(_) => continue,
            };
            if i >= qp.ranges.len() || self.is_active[i][k] || self.active.len() >= n {
                continue;
            }
            let (row, sign, rhs) = Self::normal(qp, side);
            if !rhs.is_finite() {
                continue;
            }
            let zn = self.directions(row, sign);
            if zn <= tiny * row.norm_sq().max(T::one()) {
                continue;
            }
            let t = -(sign * row.dot(&self.x) - rhs) / zn;
            for i in 0..n {
                self.x[i] += t * self.z[i];
            }
            for k in 0..self.active.len() {
                self.u[k] -= t * self.rv[k];
            }
            self.add_constraint(side, t);
            changes += 1;
        }
        loop {
            let mut worst: Option<(usize, T)> = None;
            for (k, (side, &u)) in self.active.iter().zip(&self.u).enumerate() {
                if !matches!(side, Side::Equality(_)) && u < T::zero() && worst.map_or(true, |(_, w)| u < w) {
                    worst = Some((k, u));
                }
            }
            let Some((k, u_k)) = worst else { break };
            let side = self.active[k];
            self.drop_constraint(k);
            // step along the reduced basis until the dropped multiplier is zero
            let (row, sign, _) = Self::normal(qp, side);
            self.directions(row, sign);
            let t = -u_k;
            for i in 0..n {
                self.x[i] += t * self.z[i];
            }
            for k in 0..self.active.len() {
                self.u[k] -= t * self.rv[k];
            }
            changes += 1;
        }
        changes
    }

    pub fn solve(&mut self, qp: &QpProblem<T>) -> Result<QpSolution<T>, QpError> {
        let n = qp.dim();
        if qp.hessian.rows() != n || qp.hessian.cols() != n {
            panic!("QP Hessian is {}x{}, expected {n}x{n}", qp.hessian.rows(), qp.hessian.cols());
        }
        if !qp.hessian.is_finite() || qp.linear.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite);
        }
        self.n = n;
        self.j.clear();
        self.j.resize(n * n, T::zero());
        self.r.clear();
        self.r.resize(n * n, T::zero());
        self.d.clear();
        self.d.resize(n, T::zero());
        self.z.clear();
        self.z.resize(n, T::zero());
        self.rv.clear();
        self.rv.resize(n, T::zero());
        self.active.clear();
        self.u.clear();
        self.is_active.clear();
        self.is_active.resize(qp.ranges.len(), [false; 2]);

        // J = L^{-T} is upper triangular; column `col` solves Lᵀ y = e_col.
        let mut l = qp.hessian.clone();
        if !cholesky_in_place(&mut l) {
            return Err(QpError::NotConvex);
        }
        let lt = l.transpose();
        for col in 0..n {
            let y = &mut self.j[col * n..(col + 1) * n];
            for i in (0..=col).rev() {
                let li = &lt.row(i)[i + 1..=col];
                let s = li.iter().zip(&y[i + 1..=col]).fold(if i == col { T::one() } else { T::zero() }, |acc, (a, b)| acc - *a * *b);
                y[i] = s / lt[(i, i)];
            }
        }
        // unconstrained minimizer x = -J Jᵀ g
        self.x.clear();
        self.x.resize(n, T::zero());
        for k in 0..n {
            let col = &self.j[k * n..(k + 1) * n];
            let jtg = col.iter().zip(&qp.linear).fold(T::zero(), |acc, (a, b)| acc + *a * *b);
            for (x, &c) in self.x.iter_mut().zip(col) {
                *x -= c * jtg;
            }
        }

        let tiny = T::eps() * T::lit(1e3);
        let mut changes = 0usize;

        for (idx, (row, rhs)) in qp.equalities.iter().enumerate() {
            if !rhs.is_finite() {
                return Err(QpError::NonFinite);
            }
            let zn = self.directions(row, T::one());
            let s = row.dot(&self.x) - *rhs;
            if zn <= tiny * row.norm_sq().max(T::one()) {
                if s.abs() <= tiny * (T::one() + rhs.abs()) * T::lit(1e3) {
                    continue;
                }
                return Err(QpError::DependentEqualities);
            }
            let t = -s / zn;
            for i in 0..n {
                self.x[i] += t * self.z[i];
            }
            for k in 0..self.active.len() {
                self.u[k] -= t * self.rv[k];
            }
            self.add_constraint(Side::Equality(idx), t);
            changes += 1;
        }

        if let Some(guess) = self.warm.take() {
            changes += self.seed_active_set(qp, &guess, tiny);
            self.warm = Some(guess);
        }

        let max_changes = 10 * (n + 2 * qp.ranges.len() + qp.equalities.len()) + 50;
        loop {
            // most violated inactive range side, scaled by row norm
            let mut worst: Option<(Side, T)> = None;
            let mut worst_scaled = T::zero();
            for (i, rr) in qp.ranges.iter().enumerate() {
                let ax = rr.row.dot(&self.x);
                let scale = rr.row.norm_sq().sqrt().max(T::eps());
                if !self.is_active[i][0] && rr.lower.is_finite() {
                    let s = ax - rr.lower;
                    let tol = tiny * (T::one() + rr.lower.abs());
                    if s < -tol && s / scale < worst_scaled {
                        worst_scaled = s / scale;
                        worst = Some((Side::Lower(i), s));
                    }
                }
                if !self.is_active[i][1] && rr.upper.is_finite() {
                    let s = rr.upper - ax;
                    let tol = tiny * (T::one() + rr.upper.abs());
                    if s < -tol && s / scale < worst_scaled {
                        worst_scaled = s / scale;
                        worst = Some((Side::Upper(i), s));
                    }
                }
            }
            let Some((p, _)) = worst else { break };
            let mut u_p = T::zero();
            loop {
                changes += 1;
                if changes > max_changes {
                    return Err(QpError::IterationLimit);
                }
                let (row, sign, rhs) = Self::normal(qp, p);
                let zn = self.directions(row, sign);
                // partial step: largest dual step keeping inequality multipliers >= 0
                let q = self.active.len();
                let mut t1 = T::infinity();
                let mut block = None;
                for k in 0..q {
                    if matches!(self.active[k], Side::Equality(_)) {
                        continue;
                    }
                    if self.rv[k] > T::zero() {
                        let ratio = self.u[k] / self.rv[k];
                        if ratio < t1 {
                            t1 = ratio;
                            block = Some(k);
                        }
                    }
                }
                let s_p = sign * row.dot(&self.x) - rhs;
                let t2 = if zn > tiny * row.norm_sq().max(T::eps()) { -s_p / zn } else { T::infinity() };
                let t = t1.min(t2);
                if !t.is_finite() {
                    return Err(QpError::Infeasible);
                }
                if t2.is_finite() {
                    for i in 0..n {
                        self.x[i] += t * self.z[i];
                    }
                }
                for k in 0..q {
                    self.u[k] -= t * self.rv[k];
                }
                u_p += t;
                if t2 <= t1 {
                    self.add_constraint(p, u_p);
                    break;
                }
                let k = block.expect("partial step implies a blocking constraint");
                self.drop_constraint(k);
            }
        }

        if let Some(w) = self.warm.as_mut() {
            w.clear();
            w.extend(self.active.iter().filter(|s| !matches!(s, Side::Equality(_))));
        }
        let mut eq_multipliers = vec![T::zero(); qp.equalities.len()];
        let mut range_multipliers = vec![T::zero(); qp.ranges.len()];
        for (side, &u) in self.active.iter().zip(&self.u) {
            match *side {
                Side::Equality(i) => eq_multipliers[i] = -u,
                Side::Lower(i) => range_multipliers[i] = -u,
                Side::Upper(i) => range_multipliers[i] = u,
            }
        }
        Ok(QpSolution { x: self.x.clone(), eq_multipliers, range_multipliers, active_set_changes: changes })
    }
}
