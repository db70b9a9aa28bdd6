//! Multiple-shooting transcription of the tracking problem.
//!
//! Decision vector layout, `5N+3` entries:
//! `[x₀, u₀, x₁, u₁, …, x_{N−1}, u_{N−1}, x_N]` with `x = (x, y, α)` and
//! `u = (θ̇_R, θ̇_L)`.

mod condense;

use thiserror::Error;

use crate::linalg::Matrix;
use crate::scalar::Real;
use crate::se2::Pose;
use crate::skidsteer::{Integrator, PlatformParams, SkidSteerModel, StepJacobian, WheelRates};
use crate::solver::{BlockHessian, GoldfarbIdnani, NlpProblem, QpError, QpPoint, QpStep, SparseRow};
use crate::trajectory::ReferenceSample;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OcpError {
    #[error("{what}: expected {expected} entries, found {found}")]
    Dimension { what: &'static str, expected: usize, found: usize },
    #[error("invalid horizon: {0}")]
    InvalidHorizon(&'static str),
    #[error("invalid weights: {0}")]
    InvalidWeights(&'static str),
    #[error("invalid bounds: {0}")]
    InvalidBounds(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonConfig<T> {
    pub steps: usize,
    pub dt: T,
    pub integrator: Integrator,
    pub deadzone_in_model: bool,
}

impl<T: Real> Default for HorizonConfig<T> {
    fn default() -> Self {
        Self { steps: 30, dt: T::lit(0.1), integrator: Integrator::Euler, deadzone_in_model: true }
    }
}

impl<T: Real> HorizonConfig<T> {
    pub fn validate(&self) -> Result<(), OcpError> {
        if self.steps < 1 {
            return Err(OcpError::InvalidHorizon("at least one step required"));
        }
        if !(self.dt.is_finite() && self.dt > T::zero()) {
            return Err(OcpError::InvalidHorizon("step length must be positive"));
        }
        Ok(())
    }

    pub fn num_variables(&self) -> usize {
        5 * self.steps + 3
    }
}

/// Diagonal cost weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights<T> {
    pub q_x: [T; 3],
    pub q_xdot: [T; 3],
    pub r: [T; 2],
    pub q_x_terminal: [T; 3],
    pub q_xdot_terminal: [T; 3],
}

impl<T: Real> Default for Weights<T> {
    fn default() -> Self {
        let q = [T::lit(20.0), T::lit(20.0), T::lit(12.0)];
        Self { q_x: q, q_xdot: [T::one(); 3], r: [T::lit(0.2); 2], q_x_terminal: q, q_xdot_terminal: [T::one(); 3] }
    }
}

impl<T: Real> Weights<T> {
    pub fn zero() -> Self {
        Self { q_x: [T::zero(); 3], q_xdot: [T::zero(); 3], r: [T::zero(); 2], q_x_terminal: [T::zero(); 3], q_xdot_terminal: [T::zero(); 3] }
    }

    pub fn validate(&self) -> Result<(), OcpError> {
        let all = self.q_x.iter().chain(&self.q_xdot).chain(&self.r).chain(&self.q_x_terminal).chain(&self.q_xdot_terminal);
        for w in all {
            if !(w.is_finite() && *w >= T::zero()) {
                return Err(OcpError::InvalidWeights("weights must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds<T> {
    pub pose_min: [T; 3],
    pub pose_max: [T; 3],
    pub rate_min: WheelRates<T>,
    pub rate_max: WheelRates<T>,
    pub accel_min: WheelRates<T>,
    pub accel_max: WheelRates<T>,
}

impl<T: Real> Default for Bounds<T> {
    fn default() -> Self {
        Self {
            pose_min: [T::neg_infinity(); 3],
            pose_max: [T::infinity(); 3],
            rate_min: WheelRates::splat(T::lit(0.1)),
            rate_max: WheelRates::splat(T::lit(0.8)),
            accel_min: WheelRates::splat(T::lit(-0.2)),
            accel_max: WheelRates::splat(T::lit(0.2)),
        }
    }
}

impl<T: Real> Bounds<T> {
    pub fn unbounded() -> Self {
        let lo = WheelRates::splat(T::neg_infinity());
        let hi = WheelRates::splat(T::infinity());
        Self { pose_min: [T::neg_infinity(); 3], pose_max: [T::infinity(); 3], rate_min: lo, rate_max: hi, accel_min: lo, accel_max: hi }
    }

    pub fn validate(&self) -> Result<(), OcpError> {
        let pairs = [
            (self.pose_min[0], self.pose_max[0]),
            (self.pose_min[1], self.pose_max[1]),
            (self.pose_min[2], self.pose_max[2]),
            (self.rate_min.right, self.rate_max.right),
            (self.rate_min.left, self.rate_max.left),
            (self.accel_min.right, self.accel_max.right),
            (self.accel_min.left, self.accel_max.left),
        ];
        for (lo, hi) in pairs {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(OcpError::InvalidBounds("every minimum must not exceed its maximum"));
            }
        }
        Ok(())
    }

    /// Clamps rates into the rate box.
    pub fn clamp_rates(&self, rates: WheelRates<T>) -> WheelRates<T> {
        WheelRates::new(
            rates.right.max(self.rate_min.right).min(self.rate_max.right),
            rates.left.max(self.rate_min.left).min(self.rate_max.left),
        )
    }
}

/// Flat decision vector with typed accessors.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionVector<T> {
    steps: usize,
    data: Vec<T>,
}

impl<T: Real> DecisionVector<T> {
    pub fn zeros(steps: usize) -> Self {
        Self { steps, data: vec![T::zero(); 5 * steps + 3] }
    }

    pub fn from_vec(steps: usize, data: Vec<T>) -> Result<Self, OcpError> {
        let expected = 5 * steps + 3;
        if data.len() != expected {
            return Err(OcpError::Dimension { what: "decision vector", expected, found: data.len() });
        }
        Ok(Self { steps, data })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Pose at node `k`, `0 <= k <= N`.
    pub fn state(&self, k: usize) -> Pose<T> {
        assert!(k <= self.steps, "state index {k} out of range 0..={}", self.steps);
        state_at(&self.data, k)
    }

    pub fn set_state(&mut self, k: usize, pose: Pose<T>) {
        assert!(k <= self.steps, "state index {k} out of range 0..={}", self.steps);
        self.data[5 * k..5 * k + 3].copy_from_slice(&pose.to_vector());
    }

    /// Control at interval `k`, `0 <= k < N`.
    pub fn control(&self, k: usize) -> WheelRates<T> {
        assert!(k < self.steps, "control index {k} out of range 0..{}", self.steps);
        control_at(&self.data, k)
    }

    pub fn set_control(&mut self, k: usize, rates: WheelRates<T>) {
        assert!(k < self.steps, "control index {k} out of range 0..{}", self.steps);
        self.data[5 * k + 3] = rates.right;
        self.data[5 * k + 4] = rates.left;
    }
}

#[inline]
pub(crate) fn state_at<T: Real>(z: &[T], k: usize) -> Pose<T> {
    Pose::new(z[5 * k], z[5 * k + 1], z[5 * k + 2])
}

#[inline]
pub(crate) fn control_at<T: Real>(z: &[T], k: usize) -> WheelRates<T> {
    WheelRates::new(z[5 * k + 3], z[5 * k + 4])
}

/// `x_{k+1} − F(x_k, u_k)`.
pub fn shooting_defect<T: Real>(
    config: &HorizonConfig<T>,
    params: &PlatformParams<T>,
    x_k: &Pose<T>,
    rates_k: WheelRates<T>,
    x_k1: &Pose<T>,
) -> [T; 3] {
    let model = SkidSteerModel::new(*params, config.deadzone_in_model);
    let next = model.step_with_jacobian(config.integrator, x_k, rates_k, config.dt).next;
    let target = x_k1.to_vector();
    [target[0] - next[0], target[1] - next[1], target[2] - next[2]]
}

/// Finite-difference wheel accelerations `(u_{k+1} − u_k)/dt`, `k = 0..N−2`.
pub fn acceleration_rows<T: Real>(config: &HorizonConfig<T>, z: &DecisionVector<T>) -> Vec<[T; 2]> {
    (0..z.steps().saturating_sub(1))
        .map(|k| {
            let a = z.control(k);
            let b = z.control(k + 1);
            [(b.right - a.right) / config.dt, (b.left - a.left) / config.dt]
        })
        .collect()
}

/// Simulates controls forward from `x0` with the transcription integrator.
pub fn rollout<T: Real>(
    config: &HorizonConfig<T>,
    params: &PlatformParams<T>,
    x0: Pose<T>,
    controls: &[WheelRates<T>],
) -> Result<DecisionVector<T>, OcpError> {
    if controls.len() != config.steps {
        return Err(OcpError::Dimension { what: "controls", expected: config.steps, found: controls.len() });
    }
    let model = SkidSteerModel::new(*params, config.deadzone_in_model);
    let mut z = DecisionVector::zeros(config.steps);
    let mut x = x0;
    for (k, &u) in controls.iter().enumerate() {
        z.set_state(k, x);
        z.set_control(k, u);
        x = Pose::from_vector(model.step_with_jacobian(config.integrator, &x, u, config.dt).next);
    }
    z.set_state(config.steps, x);
    Ok(z)
}

/// The transcribed NLP for one control instant.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpProblem<T> {
    pub config: HorizonConfig<T>,
    pub weights: Weights<T>,
    pub bounds: Bounds<T>,
    pub model: SkidSteerModel<T>,
    refs: Vec<ReferenceSample<T>>,
    x0: Pose<T>,
    u0: WheelRates<T>,
}

/// Builds the NLP; `refs` must hold `N+1` samples.
pub fn build_nlp<T: Real>(
    config: HorizonConfig<T>,
    weights: Weights<T>,
    bounds: Bounds<T>,
    params: PlatformParams<T>,
    refs: &[ReferenceSample<T>],
    measured_pose: Pose<T>,
    measured_rates: WheelRates<T>,
) -> Result<OcpProblem<T>, OcpError> {
    config.validate()?;
    weights.validate()?;
    bounds.validate()?;
    let mut p = OcpProblem {
        config,
        weights,
        bounds,
        model: SkidSteerModel::new(params, config.deadzone_in_model),
        refs: Vec::with_capacity(config.steps + 1),
        x0: measured_pose,
        u0: measured_rates,
    };
    p.update(refs, measured_pose, measured_rates)?;
    Ok(p)
}

impl<T: Real> OcpProblem<T> {
    /// Replaces the references and measurements, keeping everything else.
    pub fn update(&mut self, refs: &[ReferenceSample<T>], measured_pose: Pose<T>, measured_rates: WheelRates<T>) -> Result<(), OcpError> {
        let expected = self.config.steps + 1;
        if refs.len() != expected {
            return Err(OcpError::Dimension { what: "references", expected, found: refs.len() });
        }
        self.refs.clear();
        self.refs.extend_from_slice(refs);
        self.x0 = measured_pose;
        self.u0 = measured_rates;
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn references(&self) -> &[ReferenceSample<T>] {
        &self.refs
    }

    pub fn measured_pose(&self) -> Pose<T> {
        self.x0
    }

    pub fn measured_rates(&self) -> WheelRates<T> {
        self.u0
    }

    /// Rollout of `controls` from the measured pose with the pinned first control.
    pub fn rollout(&self, controls: &[WheelRates<T>]) -> Result<DecisionVector<T>, OcpError> {
        let mut u = controls.to_vec();
        if let Some(first) = u.first_mut() {
            *first = self.u0;
        }
        rollout(&self.config, &self.model.params, self.x0, &u)
    }

    fn step(&self, z: &[T], k: usize) -> StepJacobian<T> {
        self.model.step_with_jacobian(self.config.integrator, &state_at(z, k), control_at(z, k), self.config.dt)
    }

    /// Cost term for node `k` using control `u`, added with factor `scale`;
    /// optionally accumulates its gradient.
    fn stage(&self, z: &[T], k: usize, uk: usize, terminal: bool, scale: T, grad: Option<&mut [T]>) -> T {
        let w = &self.weights;
        let (qx, qv) = if terminal { (&w.q_x_terminal, &w.q_xdot_terminal) } else { (&w.q_x, &w.q_xdot) };
        let x = state_at(z, k);
        let u = control_at(z, uk);
        let r = &self.refs[k];
        let xv = x.to_vector();
        let rv = r.pose.to_vector();
        let d = self.model.derivative_with_jacobian(&x, u);
        let mut ex = [T::zero(); 3];
        let mut ev = [T::zero(); 3];
        let mut cost = T::zero();
        for i in 0..3 {
            ex[i] = xv[i] - rv[i];
            ev[i] = d.value[i] - r.rate[i];
            cost += qx[i] * ex[i] * ex[i] + qv[i] * ev[i] * ev[i];
        }
        let uv = u.to_array();
        if !terminal {
            for j in 0..2 {
                cost += w.r[j] * uv[j] * uv[j];
            }
        }
        if let Some(g) = grad {
            let two = T::lit(2.0) * scale;
            for j in 0..3 {
                let mut acc = qx[j] * ex[j];
                for i in 0..3 {
                    acc += d.d_pose[i][j] * qv[i] * ev[i];
                }
                g[5 * k + j] += two * acc;
            }
            for j in 0..2 {
                let mut acc = if terminal { T::zero() } else { w.r[j] * uv[j] };
                for i in 0..3 {
                    acc += d.d_rates[i][j] * qv[i] * ev[i];
                }
                g[5 * uk + 3 + j] += two * acc;
            }
        }
        scale * cost
    }

    fn check_len(&self, z: &[T]) {
        assert_eq!(z.len(), self.config.num_variables(), "decision vector length");
    }
}

impl<T: Real> NlpProblem<T> for OcpProblem<T> {
    fn num_variables(&self) -> usize {
        self.config.num_variables()
    }

    fn num_equalities(&self) -> usize {
        3 * self.config.steps + 5
    }

    fn num_inequalities(&self) -> usize {
        2 * (self.config.steps - 1)
    }

    fn variable_bounds(&self, lower: &mut [T], upper: &mut [T]) {
        let n = self.config.steps;
        // x₀ and u₀ are fixed by the pinning equalities instead.
        lower[..5].fill(T::neg_infinity());
        upper[..5].fill(T::infinity());
        for k in 1..=n {
            lower[5 * k..5 * k + 3].copy_from_slice(&self.bounds.pose_min);
            upper[5 * k..5 * k + 3].copy_from_slice(&self.bounds.pose_max);
            if k < n {
                lower[5 * k + 3..5 * k + 5].copy_from_slice(&self.bounds.rate_min.to_array());
                upper[5 * k + 3..5 * k + 5].copy_from_slice(&self.bounds.rate_max.to_array());
            }
        }
    }

    fn inequality_bounds(&self, lower: &mut [T], upper: &mut [T]) {
        for k in 0..self.config.steps - 1 {
            lower[2 * k..2 * k + 2].copy_from_slice(&self.bounds.accel_min.to_array());
            upper[2 * k..2 * k + 2].copy_from_slice(&self.bounds.accel_max.to_array());
        }
    }

    fn objective(&self, z: &[T]) -> T {
        self.check_len(z);
        let n = self.config.steps;
        let half = T::lit(0.5);
        let mut j = T::zero();
        for k in 1..n {
            j += self.stage(z, k, k, false, half, None);
        }
        j + self.stage(z, n, n - 1, true, T::one(), None)
    }

    fn gradient(&self, z: &[T], out: &mut [T]) {
        self.check_len(z);
        out.fill(T::zero());
        let n = self.config.steps;
        let half = T::lit(0.5);
        for k in 1..n {
            self.stage(z, k, k, false, half, Some(out));
        }
        self.stage(z, n, n - 1, true, T::one(), Some(out));
    }

    fn equalities(&self, z: &[T], out: &mut [T]) {
        self.check_len(z);
        let x0 = self.x0.to_vector();
        for i in 0..3 {
            out[i] = z[i] - x0[i];
        }
        out[3] = z[3] - self.u0.right;
        out[4] = z[4] - self.u0.left;
        for k in 0..self.config.steps {
            let next = self.step(z, k).next;
            for i in 0..3 {
                out[5 + 3 * k + i] = z[5 * (k + 1) + i] - next[i];
            }
        }
    }

    fn inequalities(&self, z: &[T], out: &mut [T]) {
        self.check_len(z);
        let dt = self.config.dt;
        for k in 0..self.config.steps - 1 {
            for j in 0..2 {
                out[2 * k + j] = (z[5 * (k + 1) + 3 + j] - z[5 * k + 3 + j]) / dt;
            }
        }
    }

    fn equality_jacobian(&self, z: &[T]) -> Vec<SparseRow<T>> {
        self.check_len(z);
        let mut rows: Vec<SparseRow<T>> = (0..5).map(SparseRow::unit).collect();
        for k in 0..self.config.steps {
            let sj = self.step(z, k);
            for i in 0..3 {
                let mut e = Vec::with_capacity(6);
                for j in 0..3 {
                    e.push((5 * k + j, -sj.a[i][j]));
                }
                for j in 0..2 {
                    e.push((5 * k + 3 + j, -sj.b[i][j]));
                }
                e.push((5 * (k + 1) + i, T::one()));
                rows.push(SparseRow::new(e));
            }
        }
        rows
    }

    fn inequality_jacobian(&self, z: &[T]) -> Vec<SparseRow<T>> {
        self.check_len(z);
        let inv = T::one() / self.config.dt;
        let mut rows = Vec::with_capacity(self.num_inequalities());
        for k in 0..self.config.steps - 1 {
            for j in 0..2 {
                rows.push(SparseRow::new(vec![(5 * k + 3 + j, -inv), (5 * (k + 1) + 3 + j, inv)]));
            }
        }
        rows
    }

    fn hessian_blocks(&self) -> Vec<usize> {
        let n = self.config.steps;
        if n == 1 {
            return vec![8];
        }
        let mut b = vec![5; n - 1];
        b.push(8);
        b
    }

    fn add_constraint_transpose_product(&self, z: &[T], lambda: &[T], mu: &[T], out: &mut [T]) {
        self.check_len(z);
        for i in 0..5 {
            out[i] += lambda[i];
        }
        for k in 0..self.config.steps {
            let sj = self.step(z, k);
            let l = &lambda[5 + 3 * k..5 + 3 * k + 3];
            for i in 0..3 {
                out[5 * (k + 1) + i] += l[i];
                for j in 0..3 {
                    out[5 * k + j] -= sj.a[i][j] * l[i];
                }
                for j in 0..2 {
                    out[5 * k + 3 + j] -= sj.b[i][j] * l[i];
                }
            }
        }
        let inv = T::one() / self.config.dt;
        for k in 0..self.config.steps - 1 {
            for j in 0..2 {
                let m = mu[2 * k + j] * inv;
                out[5 * k + 3 + j] -= m;
                out[5 * (k + 1) + 3 + j] += m;
            }
        }
    }

    fn solve_qp(&self, point: &QpPoint<'_, T>, hessian: &BlockHessian<T>, qp: &mut GoldfarbIdnani<T>) -> Result<QpStep<T>, QpError> {
        if self.config.steps < 2 {
            return crate::solver::dense_qp_step(self, point, hessian, qp);
        }
        condense::condensed_step(self, point, hessian, qp)
    }
}

/// Worst relative mismatch between the analytic first derivatives of `problem`
/// (objective gradient and both constraint Jacobians) and central differences
/// with step `1e-6`.
pub fn gradient_check<T: Real, P: NlpProblem<T> + ?Sized>(problem: &P, z: &[T]) -> T {
    let n = problem.num_variables();
    let me = problem.num_equalities();
    let mi = problem.num_inequalities();
    let h = T::lit(1e-6);
    let mut grad = vec![T::zero(); n];
    problem.gradient(z, &mut grad);
    let mut jac = Matrix::zeros(me + mi, n);
    for (r, row) in problem.equality_jacobian(z).iter().enumerate() {
        for &(j, a) in &row.entries {
            jac[(r, j)] += a;
        }
    }
    for (r, row) in problem.inequality_jacobian(z).iter().enumerate() {
        for &(j, a) in &row.entries {
            jac[(me + r, j)] += a;
        }
    }
    let rel = |analytic: T, fd: T| (analytic - fd).abs() / T::one().max(analytic.abs()).max(fd.abs());
    let mut zp = z.to_vec();
    let mut cp = vec![T::zero(); me];
    let mut cm = vec![T::zero(); me];
    let mut gp = vec![T::zero(); mi];
    let mut gm = vec![T::zero(); mi];
    let mut worst = T::zero();
    for j in 0..n {
        let orig = zp[j];
        zp[j] = orig + h;
        let fp = problem.objective(&zp);
        problem.equalities(&zp, &mut cp);
        problem.inequalities(&zp, &mut gp);
        zp[j] = orig - h;
        let fm = problem.objective(&zp);
        problem.equalities(&zp, &mut cm);
        problem.inequalities(&zp, &mut gm);
        zp[j] = orig;
        let two_h = h + h;
        worst = worst.max(rel(grad[j], (fp - fm) / two_h));
        for r in 0..me {
            worst = worst.max(rel(jac[(r, j)], (cp[r] - cm[r]) / two_h));
        }
        for r in 0..mi {
            worst = worst.max(rel(jac[(me + r, j)], (gp[r] - gm[r]) / two_h));
        }
    }
    worst
}

#[cfg(test)]
mod tests;
