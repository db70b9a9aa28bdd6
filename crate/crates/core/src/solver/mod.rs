//! Sequential quadratic programming with a block BFGS Hessian and an ℓ1 merit
//! line search.
//!
//! Problems implement [`NlpProblem`]. The subproblem solve is a trait method
//! so structured problems (the shooting OCP) can condense; the default builds
//! one dense QP over all variables.

pub mod bfgs;
pub mod qp;
mod warm;

use thiserror::Error;

pub use bfgs::{BlockHessian, UpdateStats};
pub use qp::{GoldfarbIdnani, QpError, QpProblem, QpSolution, RangeRow, SparseRow};
pub use warm::warm_start_shift;

use crate::linalg::{dot, norm_inf};
use crate::scalar::Real;

/// Smooth NLP `min f(z)` s.t. `c(z) = 0`, `lo_g <= g(z) <= hi_g`, `lb <= z <= ub`.
pub trait NlpProblem<T: Real> {
    fn num_variables(&self) -> usize;
    fn num_equalities(&self) -> usize;
    fn num_inequalities(&self) -> usize;
    fn variable_bounds(&self, lower: &mut [T], upper: &mut [T]);
    fn inequality_bounds(&self, lower: &mut [T], upper: &mut [T]);
    fn objective(&self, z: &[T]) -> T;
    fn gradient(&self, z: &[T], out: &mut [T]);
    fn equalities(&self, z: &[T], out: &mut [T]);
    fn inequalities(&self, z: &[T], out: &mut [T]);
    /// Equality Jacobian as sparse rows.
    fn equality_jacobian(&self, z: &[T]) -> Vec<SparseRow<T>>;
    /// Inequality Jacobian as sparse rows.
    fn inequality_jacobian(&self, z: &[T]) -> Vec<SparseRow<T>>;
    /// Sizes of the contiguous Hessian blocks; must sum to `num_variables`.
    fn hessian_blocks(&self) -> Vec<usize> {
        vec![self.num_variables()]
    }

    /// `out += J_eqᵀ λ + J_inᵀ μ`.
    fn add_constraint_transpose_product(&self, z: &[T], lambda: &[T], mu: &[T], out: &mut [T]) {
        for (row, &l) in self.equality_jacobian(z).iter().zip(lambda) {
            for &(i, a) in &row.entries {
                out[i] += a * l;
            }
        }
        for (row, &m) in self.inequality_jacobian(z).iter().zip(mu) {
            for &(i, a) in &row.entries {
                out[i] += a * m;
            }
        }
    }

    /// Computes the SQP step and the new multiplier estimates.
    fn solve_qp(&self, point: &QpPoint<'_, T>, hessian: &BlockHessian<T>, qp: &mut GoldfarbIdnani<T>) -> Result<QpStep<T>, QpError> {
        dense_qp_step(self, point, hessian, qp)
    }
}

/// Linearization point handed to [`NlpProblem::solve_qp`].
#[derive(Debug, Clone, Copy)]
pub struct QpPoint<'a, T> {
    pub z: &'a [T],
    pub gradient: &'a [T],
    pub equalities: &'a [T],
    pub inequalities: &'a [T],
    pub lower: &'a [T],
    pub upper: &'a [T],
    pub ineq_lower: &'a [T],
    pub ineq_upper: &'a [T],
}

/// Step `d` and full (not incremental) multipliers of the QP subproblem.
#[derive(Debug, Clone, PartialEq)]
pub struct QpStep<T> {
    pub step: Vec<T>,
    pub eq_multipliers: Vec<T>,
    pub ineq_multipliers: Vec<T>,
    pub bound_multipliers: Vec<T>,
}

/// Generic subproblem: one dense QP over every variable.
pub fn dense_qp_step<T: Real, P: NlpProblem<T> + ?Sized>(
    problem: &P,
    point: &QpPoint<'_, T>,
    hessian: &BlockHessian<T>,
    qp: &mut GoldfarbIdnani<T>,
) -> Result<QpStep<T>, QpError> {
    let n = problem.num_variables();
    let mut sub = QpProblem::new(hessian.to_dense(), point.gradient.to_vec());
    for (row, &c) in problem.equality_jacobian(point.z).into_iter().zip(point.equalities) {
        sub.equalities.push((row, -c));
    }
    let ineq_rows = problem.inequality_jacobian(point.z);
    let m = ineq_rows.len();
    for (i, row) in ineq_rows.into_iter().enumerate() {
        let g = point.inequalities[i];
        sub.ranges.push(RangeRow { row, lower: point.ineq_lower[i] - g, upper: point.ineq_upper[i] - g });
    }
    let mut bound_rows = Vec::new();
    for i in 0..n {
        if point.lower[i].is_finite() || point.upper[i].is_finite() {
            bound_rows.push(i);
            sub.ranges.push(RangeRow {
                row: SparseRow::unit(i),
                lower: point.lower[i] - point.z[i],
                upper: point.upper[i] - point.z[i],
            });
        }
    }
    let sol = qp.solve(&sub)?;
    let mut bound_multipliers = vec![T::zero(); n];
    for (k, &i) in bound_rows.iter().enumerate() {
        bound_multipliers[i] = sol.range_multipliers[m + k];
    }
    Ok(QpStep {
        step: sol.x,
        eq_multipliers: sol.eq_multipliers,
        ineq_multipliers: sol.range_multipliers[..m].to_vec(),
        bound_multipliers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverMode {
    /// Iterate to tolerance.
    Refine,
    /// Real-time iteration: a fixed small number of SQP steps per call.
    RealTime,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings<T> {
    pub mode: SolverMode,
    pub tolerance: T,
    pub max_iterations: usize,
    /// Minimum eigenvalue kept by every Hessian block.
    pub regularization: T,
    pub initial_hessian_scale: T,
    pub armijo: T,
    pub backtrack: T,
    pub max_backtracks: usize,
    /// Retry a rejected full step once with a second-order correction.
    pub second_order_correction: bool,
}

impl<T: Real> SolverSettings<T> {
    pub fn refine() -> Self {
        Self {
            mode: SolverMode::Refine,
            tolerance: T::lit(1e-6),
            max_iterations: 200,
            regularization: T::lit(1e-8),
            initial_hessian_scale: T::one(),
            armijo: T::lit(1e-4),
            backtrack: T::lit(0.5),
            max_backtracks: 30,
            second_order_correction: true,
        }
    }

    pub fn real_time() -> Self {
        Self { mode: SolverMode::RealTime, max_iterations: 1, ..Self::refine() }
    }
}

impl<T: Real> Default for SolverSettings<T> {
    fn default() -> Self {
        Self::real_time()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    IterationLimit,
    /// Line search found no merit decrease.
    LineSearchFailed,
    /// Subproblem infeasible or non-finite evaluation; the Hessian was reset.
    NumericFailure,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Converged => "converged",
            SolveStatus::IterationLimit => "iteration_limit",
            SolveStatus::LineSearchFailed => "line_search_failed",
            SolveStatus::NumericFailure => "numeric_failure",
        }
    }
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("{what} has length {found}, expected {expected}")]
    Dimension { what: &'static str, expected: usize, found: usize },
    #[error("Hessian blocks sum to {found}, problem has {expected} variables")]
    BlockLayout { expected: usize, found: usize },
}

/// First-order optimality measures, all infinity norms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResidual<T> {
    pub stationarity: T,
    pub primal: T,
    pub complementarity: T,
}

impl<T: Real> KktResidual<T> {
    pub fn max(&self) -> T {
        self.stationarity.max(self.primal).max(self.complementarity)
    }

    pub fn converged(&self, tol: T) -> bool {
        self.max() <= tol
    }
}

/// Everything carried between solver calls.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState<T> {
    pub primal: Vec<T>,
    pub eq_multipliers: Vec<T>,
    pub ineq_multipliers: Vec<T>,
    pub bound_multipliers: Vec<T>,
    pub hessian: BlockHessian<T>,
    pub penalty: T,
    pub kkt: KktResidual<T>,
    pub total_qp_solves: u64,
    pub hessian_resets: u64,
}

impl<T: Real> SolverState<T> {
    pub fn new<P: NlpProblem<T> + ?Sized>(problem: &P, primal: Vec<T>, settings: &SolverSettings<T>) -> Self {
        Self {
            eq_multipliers: vec![T::zero(); problem.num_equalities()],
            ineq_multipliers: vec![T::zero(); problem.num_inequalities()],
            bound_multipliers: vec![T::zero(); problem.num_variables()],
            hessian: BlockHessian::new(&problem.hessian_blocks(), settings.initial_hessian_scale),
            primal,
            penalty: T::one(),
            kkt: KktResidual::default(),
            total_qp_solves: 0,
            hessian_resets: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveReport<T> {
    pub status: SolveStatus,
    pub qp_solves: usize,
    pub kkt: KktResidual<T>,
    pub objective: T,
    /// ℓ1 constraint violation at the returned point.
    pub violation: T,
}

/// Scratch evaluations at one point.
struct Eval<T> {
    f: T,
    grad: Vec<T>,
    c: Vec<T>,
    g: Vec<T>,
}

impl<T: Real> Eval<T> {
    fn new<P: NlpProblem<T> + ?Sized>(p: &P) -> Self {
        Self {
            f: T::zero(),
            grad: vec![T::zero(); p.num_variables()],
            c: vec![T::zero(); p.num_equalities()],
            g: vec![T::zero(); p.num_inequalities()],
        }
    }

    fn values<P: NlpProblem<T> + ?Sized>(&mut self, p: &P, z: &[T]) -> bool {
        self.f = p.objective(z);
        p.equalities(z, &mut self.c);
        p.inequalities(z, &mut self.g);
        self.f.is_finite() && self.c.iter().chain(&self.g).all(|v| v.is_finite())
    }

    fn gradient<P: NlpProblem<T> + ?Sized>(&mut self, p: &P, z: &[T]) -> bool {
        p.gradient(z, &mut self.grad);
        self.grad.iter().all(|v| v.is_finite())
    }
}

struct Bounds<T> {
    lb: Vec<T>,
    ub: Vec<T>,
    glo: Vec<T>,
    ghi: Vec<T>,
}

impl<T: Real> Bounds<T> {
    fn of<P: NlpProblem<T> + ?Sized>(p: &P) -> Self {
        let n = p.num_variables();
        let m = p.num_inequalities();
        let mut b = Self { lb: vec![T::zero(); n], ub: vec![T::zero(); n], glo: vec![T::zero(); m], ghi: vec![T::zero(); m] };
        p.variable_bounds(&mut b.lb, &mut b.ub);
        p.inequality_bounds(&mut b.glo, &mut b.ghi);
        b
    }

    fn violation(&self, e: &Eval<T>, z: &[T]) -> T {
        let mut v = e.c.iter().fold(T::zero(), |a, c| a + c.abs());
        for i in 0..e.g.len() {
            v += (self.glo[i] - e.g[i]).max(T::zero()) + (e.g[i] - self.ghi[i]).max(T::zero());
        }
        for i in 0..z.len() {
            v += (self.lb[i] - z[i]).max(T::zero()) + (z[i] - self.ub[i]).max(T::zero());
        }
        v
    }
}

fn side_complementarity<T: Real>(value: T, lo: T, hi: T, mult: T) -> T {
    if mult > T::zero() {
        if hi.is_finite() {
            (mult * (hi - value)).abs()
        } else {
            mult
        }
    } else if mult < T::zero() {
        if lo.is_finite() {
            (mult * (value - lo)).abs()
        } else {
            -mult
        }
    } else {
        T::zero()
    }
}

fn residual<T: Real, P: NlpProblem<T> + ?Sized>(p: &P, st: &SolverState<T>, e: &Eval<T>, b: &Bounds<T>) -> KktResidual<T> {
    let z = &st.primal;
    let mut lag = e.grad.clone();
    p.add_constraint_transpose_product(z, &st.eq_multipliers, &st.ineq_multipliers, &mut lag);
    for (l, nu) in lag.iter_mut().zip(&st.bound_multipliers) {
        *l += *nu;
    }
    let mut primal = norm_inf(&e.c);
    let mut comp = T::zero();
    for i in 0..e.g.len() {
        primal = primal.max(b.glo[i] - e.g[i]).max(e.g[i] - b.ghi[i]);
        comp = comp.max(side_complementarity(e.g[i], b.glo[i], b.ghi[i], st.ineq_multipliers[i]));
    }
    for i in 0..z.len() {
        primal = primal.max(b.lb[i] - z[i]).max(z[i] - b.ub[i]);
        comp = comp.max(side_complementarity(z[i], b.lb[i], b.ub[i], st.bound_multipliers[i]));
    }
    KktResidual { stationarity: norm_inf(&lag), primal, complementarity: comp }
}

fn check_dims<T: Real, P: NlpProblem<T> + ?Sized>(p: &P, st: &SolverState<T>) -> Result<(), SolverError> {
    let checks = [
        ("primal", p.num_variables(), st.primal.len()),
        ("equality multipliers", p.num_equalities(), st.eq_multipliers.len()),
        ("inequality multipliers", p.num_inequalities(), st.ineq_multipliers.len()),
        ("bound multipliers", p.num_variables(), st.bound_multipliers.len()),
    ];
    for (what, expected, found) in checks {
        if expected != found {
            return Err(SolverError::Dimension { what, expected, found });
        }
    }
    let blocks: usize = p.hessian_blocks().iter().sum();
    if blocks != p.num_variables() {
        return Err(SolverError::BlockLayout { expected: p.num_variables(), found: blocks });
    }
    Ok(())
}

/// KKT residual of `state` for `problem`, using the stored multipliers.
pub fn kkt_residual<T: Real, P: NlpProblem<T> + ?Sized>(problem: &P, state: &SolverState<T>) -> Result<KktResidual<T>, SolverError> {
    check_dims(problem, state)?;
    let b = Bounds::of(problem);
    let mut e = Eval::new(problem);
    e.values(problem, &state.primal);
    e.gradient(problem, &state.primal);
    Ok(residual(problem, state, &e, &b))
}

/// Runs up to `settings.max_iterations` SQP iterations from `state`.
///
/// Convergence is tested before each subproblem, so a converged state costs
/// no QP solves. In `Refine` mode the ℓ1 merit never increases.
pub fn solve<T: Real, P: NlpProblem<T> + ?Sized>(
    problem: &P,
    state: &mut SolverState<T>,
    settings: &SolverSettings<T>,
    qp: &mut GoldfarbIdnani<T>,
) -> Result<SolveReport<T>, SolverError> {
    check_dims(problem, state)?;
    let blocks = problem.hessian_blocks();
    if !state.hessian.has_layout(&blocks) {
        state.hessian = BlockHessian::new(&blocks, settings.initial_hessian_scale);
    }
    let n = problem.num_variables();
    let b = Bounds::of(problem);
    for i in 0..n {
        state.primal[i] = state.primal[i].max(b.lb[i]).min(b.ub[i]);
    }

    let mut cur = Eval::new(problem);
    let mut trial = Eval::new(problem);
    let mut z_trial = vec![T::zero(); n];
    let mut s = vec![T::zero(); n];
    let mut y = vec![T::zero(); n];

    let numeric_failure = |state: &mut SolverState<T>, cur: &Eval<T>, b: &Bounds<T>, qp_solves| {
        state.hessian.reset(settings.initial_hessian_scale);
        state.hessian_resets += 1;
        let kkt = KktResidual { stationarity: T::infinity(), primal: T::infinity(), complementarity: T::infinity() };
        state.kkt = kkt;
        SolveReport { status: SolveStatus::NumericFailure, qp_solves, kkt, objective: cur.f, violation: b.violation(cur, &state.primal) }
    };

    if !cur.values(problem, &state.primal) || !cur.gradient(problem, &state.primal) {
        return Ok(numeric_failure(state, &cur, &b, 0));
    }
    let mut qp_solves = 0usize;
    let mut status = SolveStatus::IterationLimit;
    loop {
        let kkt = residual(problem, state, &cur, &b);
        state.kkt = kkt;
        if kkt.converged(settings.tolerance) {
            status = SolveStatus::Converged;
            break;
        }
        if qp_solves >= settings.max_iterations {
            break;
        }
        let point = QpPoint {
            z: &state.primal,
            gradient: &cur.grad,
            equalities: &cur.c,
            inequalities: &cur.g,
            lower: &b.lb,
            upper: &b.ub,
            ineq_lower: &b.glo,
            ineq_upper: &b.ghi,
        };
        qp_solves += 1;
        state.total_qp_solves += 1;
        let step = match problem.solve_qp(&point, &state.hessian, qp) {
            Ok(step) if step.step.iter().all(|v| v.is_finite()) => step,
            _ => return Ok(numeric_failure(state, &cur, &b, qp_solves)),
        };

        let max_mult = norm_inf(&step.eq_multipliers).max(norm_inf(&step.ineq_multipliers)).max(norm_inf(&step.bound_multipliers));
        if state.penalty < max_mult * T::lit(1.1) {
            state.penalty = max_mult * T::lit(1.5) + T::lit(1e-3);
        }
        let rho = state.penalty;
        let viol0 = b.violation(&cur, &state.primal);
        let merit0 = cur.f + rho * viol0;
        let slope = dot(&cur.grad, &step.step) - rho * viol0;

        let mut alpha = T::one();
        let mut accepted = false;
        let mut correction: Option<Vec<T>> = None;
        for attempt in 0..=settings.max_backtracks {
            let dir = correction.as_deref().unwrap_or(&step.step);
            for i in 0..n {
                z_trial[i] = (state.primal[i] + alpha * dir[i]).max(b.lb[i]).min(b.ub[i]);
            }
            let evaluated = trial.values(problem, &z_trial);
            if evaluated {
                let merit = trial.f + rho * b.violation(&trial, &z_trial);
                if merit <= merit0 + settings.armijo * alpha * slope.min(T::zero()) {
                    accepted = true;
                    break;
                }
            }
            if attempt == 0 && evaluated && settings.second_order_correction {
                // the full step was rejected: retry once with the constraint
                // curvature it exposed folded into the linearization
                if let Some(d) = second_order_step(problem, qp, &point, &state.hessian, &step.step, &trial) {
                    correction = Some(d);
                    continue;
                }
            }
            if correction.take().is_some() {
                // correction rejected as well; backtrack along the plain step
                alpha = T::one();
            }
            alpha *= settings.backtrack;
        }
        if !accepted {
            state.hessian.reset(settings.initial_hessian_scale);
            state.hessian_resets += 1;
            status = SolveStatus::LineSearchFailed;
            break;
        }
        if !trial.gradient(problem, &z_trial) {
            return Ok(numeric_failure(state, &cur, &b, qp_solves));
        }

        // multipliers take the full QP estimate; the primal takes the damped step
        state.eq_multipliers.copy_from_slice(&step.eq_multipliers);
        state.ineq_multipliers.copy_from_slice(&step.ineq_multipliers);
        state.bound_multipliers.copy_from_slice(&step.bound_multipliers);

        // y = ∇ₓL(z⁺) − ∇ₓL(z), bound terms cancel
        y.copy_from_slice(&trial.grad);
        problem.add_constraint_transpose_product(&z_trial, &state.eq_multipliers, &state.ineq_multipliers, &mut y);
        let mut lag_old = cur.grad.clone();
        problem.add_constraint_transpose_product(&state.primal, &state.eq_multipliers, &state.ineq_multipliers, &mut lag_old);
        for i in 0..n {
            y[i] -= lag_old[i];
            s[i] = z_trial[i] - state.primal[i];
        }
        // curvature pairs from steps at rounding level carry no information
        for blk in 0..state.hessian.num_blocks() {
            let (o, len) = (state.hessian.offset(blk), state.hessian.sizes()[blk]);
            let scale = norm_inf(&state.primal[o..o + len]).max(T::one());
            if norm_inf(&s[o..o + len]) <= T::eps().sqrt() * T::lit(1e-2) * scale {
                s[o..o + len].fill(T::zero());
            }
        }
        let stats = state.hessian.update(&s, &y, settings.regularization);
        state.hessian_resets += stats.reset as u64;

        state.primal.copy_from_slice(&z_trial);
        std::mem::swap(&mut cur, &mut trial);
    }
    let violation = b.violation(&cur, &state.primal);
    Ok(SolveReport { status, qp_solves, kkt: state.kkt, objective: cur.f, violation })
}

/// Step of the QP re-linearized with the constraint values observed at the
/// rejected trial point `z + d`.
fn second_order_step<T: Real, P: NlpProblem<T> + ?Sized>(
    problem: &P,
    qp: &mut GoldfarbIdnani<T>,
    point: &QpPoint<'_, T>,
    hessian: &BlockHessian<T>,
    d: &[T],
    trial: &Eval<T>,
) -> Option<Vec<T>> {
    let shifted = |rows: Vec<SparseRow<T>>, at: &[T]| -> Vec<T> { rows.iter().zip(at).map(|(r, v)| *v - r.dot(d)).collect() };
    let eq = shifted(problem.equality_jacobian(point.z), &trial.c);
    let ineq = shifted(problem.inequality_jacobian(point.z), &trial.g);
    let corrected = QpPoint {
        z: point.z,
        gradient: point.gradient,
        equalities: &eq,
        inequalities: &ineq,
        lower: point.lower,
        upper: point.upper,
        ineq_lower: point.ineq_lower,
        ineq_upper: point.ineq_upper,
    };
    let s = problem.solve_qp(&corrected, hessian, qp).ok()?;
    s.step.iter().all(|v| v.is_finite()).then_some(s.step)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Rosenbrock with a disc constraint and a box: a classic small NLP.
    struct Rosen;

    impl NlpProblem<f64> for Rosen {
        fn num_variables(&self) -> usize {
            2
        }
        fn num_equalities(&self) -> usize {
            0
        }
        fn num_inequalities(&self) -> usize {
            1
        }
        fn variable_bounds(&self, lower: &mut [f64], upper: &mut [f64]) {
            lower.fill(-1.5);
            upper.fill(1.5);
        }
        fn inequality_bounds(&self, lower: &mut [f64], upper: &mut [f64]) {
            lower[0] = f64::NEG_INFINITY;
            upper[0] = 1.0;
        }
        fn objective(&self, z: &[f64]) -> f64 {
            (1.0 - z[0]).powi(2) + 100.0 * (z[1] - z[0] * z[0]).powi(2)
        }
        fn gradient(&self, z: &[f64], out: &mut [f64]) {
            out[0] = -2.0 * (1.0 - z[0]) - 400.0 * z[0] * (z[1] - z[0] * z[0]);
            out[1] = 200.0 * (z[1] - z[0] * z[0]);
        }
        fn equalities(&self, _z: &[f64], _out: &mut [f64]) {}
        fn inequalities(&self, z: &[f64], out: &mut [f64]) {
            out[0] = z[0] * z[0] + z[1] * z[1];
        }
        fn equality_jacobian(&self, _z: &[f64]) -> Vec<SparseRow<f64>> {
            Vec::new()
        }
        fn inequality_jacobian(&self, z: &[f64]) -> Vec<SparseRow<f64>> {
            vec![SparseRow::new(vec![(0, 2.0 * z[0]), (1, 2.0 * z[1])])]
        }
    }

    /// Equality-constrained quadratic with a known answer: min x²+y² s.t. x+y=2.
    struct Quad;

    impl NlpProblem<f64> for Quad {
        fn num_variables(&self) -> usize {
            2
        }
        fn num_equalities(&self) -> usize {
            1
        }
        fn num_inequalities(&self) -> usize {
            0
        }
        fn variable_bounds(&self, lower: &mut [f64], upper: &mut [f64]) {
            lower.fill(f64::NEG_INFINITY);
            upper.fill(f64::INFINITY);
        }
        fn inequality_bounds(&self, _lower: &mut [f64], _upper: &mut [f64]) {}
        fn objective(&self, z: &[f64]) -> f64 {
            z[0] * z[0] + z[1] * z[1]
        }
        fn gradient(&self, z: &[f64], out: &mut [f64]) {
            out[0] = 2.0 * z[0];
            out[1] = 2.0 * z[1];
        }
        fn equalities(&self, z: &[f64], out: &mut [f64]) {
            out[0] = z[0] + z[1] - 2.0;
        }
        fn inequalities(&self, _z: &[f64], _out: &mut [f64]) {}
        fn equality_jacobian(&self, _z: &[f64]) -> Vec<SparseRow<f64>> {
            vec![SparseRow::new(vec![(0, 1.0), (1, 1.0)])]
        }
        fn inequality_jacobian(&self, _z: &[f64]) -> Vec<SparseRow<f64>> {
            Vec::new()
        }
        fn hessian_blocks(&self) -> Vec<usize> {
            vec![1, 1]
        }
    }

    #[test]
    fn refine_solves_constrained_rosenbrock() {
        let settings = SolverSettings::refine();
        let mut st = SolverState::new(&Rosen, vec![-1.2, 1.0], &settings);
        let rep = solve(&Rosen, &mut st, &settings, &mut GoldfarbIdnani::new()).unwrap();
        assert_eq!(rep.status, SolveStatus::Converged, "{rep:?}");
        // optimum on the disc boundary near (0.7864, 0.6177)
        assert!((st.primal[0] - 0.786_415).abs() < 1e-4, "{:?}", st.primal);
        assert!((st.primal[1] - 0.617_698).abs() < 1e-4);
        assert!(st.ineq_multipliers[0] > 0.0);
    }

    #[test]
    fn equality_problem_and_multiplier() {
        let settings = SolverSettings::refine();
        let mut st = SolverState::new(&Quad, vec![5.0, -3.0], &settings);
        let rep = solve(&Quad, &mut st, &settings, &mut GoldfarbIdnani::new()).unwrap();
        assert_eq!(rep.status, SolveStatus::Converged);
        assert!((st.primal[0] - 1.0).abs() < 1e-6 && (st.primal[1] - 1.0).abs() < 1e-6);
        // 2x + λ = 0
        assert!((st.eq_multipliers[0] + 2.0).abs() < 1e-6);
    }

    #[test]
    fn converged_state_costs_no_qp() {
        let settings = SolverSettings::refine();
        let mut st = SolverState::new(&Quad, vec![5.0, -3.0], &settings);
        let mut qp = GoldfarbIdnani::new();
        solve(&Quad, &mut st, &settings, &mut qp).unwrap();
        let rep = solve(&Quad, &mut st, &SolverSettings::real_time(), &mut qp).unwrap();
        assert_eq!(rep.qp_solves, 0);
        assert_eq!(rep.status, SolveStatus::Converged);
    }

    #[test]
    fn real_time_does_one_qp() {
        let settings = SolverSettings::real_time();
        let mut st = SolverState::new(&Rosen, vec![-1.2, 1.0], &settings);
        let rep = solve(&Rosen, &mut st, &settings, &mut GoldfarbIdnani::new()).unwrap();
        assert_eq!(rep.qp_solves, 1);
        assert_eq!(rep.status, SolveStatus::IterationLimit);
    }

    #[test]
    fn merit_is_monotone_in_refine() {
        let settings = SolverSettings { max_iterations: 1, ..SolverSettings::refine() };
        let mut st = SolverState::new(&Rosen, vec![-1.2, 1.0], &settings);
        let mut qp = GoldfarbIdnani::new();
        let mut prev = (Rosen.objective(&st.primal), (1.2f64 * 1.2 + 1.0 - 1.0).max(0.0));
        for _ in 0..60 {
            let rep = solve(&Rosen, &mut st, &settings, &mut qp).unwrap();
            // compare both points under the penalty the line search used
            let before = prev.0 + st.penalty * prev.1;
            let after = rep.objective + st.penalty * rep.violation;
            assert!(after <= before + 1e-12, "{after} > {before}");
            prev = (rep.objective, rep.violation);
            if rep.status == SolveStatus::Converged {
                break;
            }
        }
    }

    /// min ‖z − z*‖² with no constraints.
    struct Bowl;

    impl NlpProblem<f64> for Bowl {
        fn num_variables(&self) -> usize {
            3
        }
        fn num_equalities(&self) -> usize {
            0
        }
        fn num_inequalities(&self) -> usize {
            0
        }
        fn variable_bounds(&self, lower: &mut [f64], upper: &mut [f64]) {
            lower.fill(f64::NEG_INFINITY);
            upper.fill(f64::INFINITY);
        }
        fn inequality_bounds(&self, _lower: &mut [f64], _upper: &mut [f64]) {}
        fn objective(&self, z: &[f64]) -> f64 {
            (z[0] - 1.0).powi(2) + (z[1] + 2.0).powi(2) + (z[2] - 0.5).powi(2)
        }
        fn gradient(&self, z: &[f64], out: &mut [f64]) {
            out[0] = 2.0 * (z[0] - 1.0);
            out[1] = 2.0 * (z[1] + 2.0);
            out[2] = 2.0 * (z[2] - 0.5);
        }
        fn equalities(&self, _z: &[f64], _out: &mut [f64]) {}
        fn inequalities(&self, _z: &[f64], _out: &mut [f64]) {}
        fn equality_jacobian(&self, _z: &[f64]) -> Vec<SparseRow<f64>> {
            Vec::new()
        }
        fn inequality_jacobian(&self, _z: &[f64]) -> Vec<SparseRow<f64>> {
            Vec::new()
        }
    }

    #[test]
    fn unconstrained_quadratic() {
        let settings = SolverSettings { tolerance: 1e-10, max_iterations: 50, ..SolverSettings::refine() };
        let mut st = SolverState::new(&Bowl, vec![40.0, -7.0, 3.0], &settings);
        let rep = solve(&Bowl, &mut st, &settings, &mut GoldfarbIdnani::new()).unwrap();
        assert_eq!(rep.status, SolveStatus::Converged);
        assert!(rep.qp_solves <= 50);
        for (a, b) in st.primal.iter().zip([1.0, -2.0, 0.5]) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    /// min (u−1)² s.t. 0 ≤ u ≤ 0.8.
    struct Clamp;

    impl NlpProblem<f64> for Clamp {
        fn num_variables(&self) -> usize {
            1
        }
        fn num_equalities(&self) -> usize {
            0
        }
        fn num_inequalities(&self) -> usize {
            0
        }
        fn variable_bounds(&self, lower: &mut [f64], upper: &mut [f64]) {
            lower[0] = 0.0;
            upper[0] = 0.8;
        }
        fn inequality_bounds(&self, _lower: &mut [f64], _upper: &mut [f64]) {}
        fn objective(&self, z: &[f64]) -> f64 {
            (z[0] - 1.0).powi(2)
        }
        fn gradient(&self, z: &[f64], out: &mut [f64]) {
            out[0] = 2.0 * (z[0] - 1.0);
        }
        fn equalities(&self, _z: &[f64], _out: &mut [f64]) {}
        fn inequalities(&self, _z: &[f64], _out: &mut [f64]) {}
        fn equality_jacobian(&self, _z: &[f64]) -> Vec<SparseRow<f64>> {
            Vec::new()
        }
        fn inequality_jacobian(&self, _z: &[f64]) -> Vec<SparseRow<f64>> {
            Vec::new()
        }
    }

    #[test]
    fn box_toy_and_its_kkt() {
        let settings = SolverSettings::refine();
        let mut st = SolverState::new(&Clamp, vec![0.1], &settings);
        let rep = solve(&Clamp, &mut st, &settings, &mut GoldfarbIdnani::new()).unwrap();
        assert_eq!(rep.status, SolveStatus::Converged);
        assert!((st.primal[0] - 0.8).abs() < 1e-12);
        let kkt = kkt_residual(&Clamp, &st).unwrap();
        assert!(kkt.stationarity < 1e-10 && kkt.primal < 1e-10 && kkt.complementarity < 1e-10);

        // feasible but suboptimal
        let mut off = st.clone();
        off.primal[0] = 0.3;
        off.bound_multipliers[0] = 0.0;
        let kkt = kkt_residual(&Clamp, &off).unwrap();
        assert!(kkt.primal == 0.0 && kkt.stationarity > 0.1);
    }

    #[test]
    fn identical_inputs_identical_outputs() {
        let settings = SolverSettings { max_iterations: 7, ..SolverSettings::refine() };
        let run = || {
            let mut st = SolverState::new(&Rosen, vec![-1.2, 1.0], &settings);
            solve(&Rosen, &mut st, &settings, &mut GoldfarbIdnani::new()).unwrap();
            st.primal.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let settings = SolverSettings::refine();
        let mut st = SolverState::new(&Quad, vec![0.0; 3], &settings);
        assert!(matches!(solve(&Quad, &mut st, &settings, &mut GoldfarbIdnani::new()), Err(SolverError::Dimension { .. })));
    }
}
