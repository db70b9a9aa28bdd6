//! Skid-steer kinematics: wheel rates to body twist, the continuous-time
//! pose equation, the smooth dead-zone gate and one-step integrators.

use thiserror::Error;

use crate::scalar::Real;
use crate::se2::{adjoint_transform, Pose, Twist};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid platform parameter `{name}` = {value}")]
    InvalidParam { name: &'static str, value: f64 },
    #[error("time step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("non-finite state derivative at pose ({x}, {y}, {alpha})")]
    NumericFailure { x: f64, y: f64, alpha: f64 },
}

/// Geometric and dead-zone parameters of the platform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlatformParams<T> {
    /// Effective wheel rolling radius `r` [m].
    pub wheel_radius: T,
    /// Lateral half-spacing `c` between left and right wheels [m].
    pub half_track: T,
    /// Longitudinal half-spacing `a` [m]. Not used by the kinematics.
    pub half_wheelbase: T,
    /// Dead-zone threshold [rad/s].
    pub deadzone_delta: T,
    /// Dead-zone gate sharpness [s/rad].
    pub deadzone_kappa: T,
}

impl<T: Real> Default for PlatformParams<T> {
    fn default() -> Self {
        Self {
            wheel_radius: T::lit(0.3),
            half_track: T::lit(1.0),
            half_wheelbase: T::lit(0.85),
            deadzone_delta: T::lit(0.05),
            deadzone_kappa: T::lit(100.0),
        }
    }
}

impl<T: Real> PlatformParams<T> {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = |name, v: T| {
            if v.is_finite() && v > T::zero() {
                Ok(())
            } else {
                Err(ModelError::InvalidParam { name, value: v.as_f64() })
            }
        };
        positive("wheel_radius", self.wheel_radius)?;
        positive("half_track", self.half_track)?;
        positive("deadzone_kappa", self.deadzone_kappa)?;
        if !(self.half_wheelbase.is_finite() && self.half_wheelbase >= T::zero()) {
            return Err(ModelError::InvalidParam { name: "half_wheelbase", value: self.half_wheelbase.as_f64() });
        }
        if !(self.deadzone_delta.is_finite() && self.deadzone_delta >= T::zero()) {
            return Err(ModelError::InvalidParam { name: "deadzone_delta", value: self.deadzone_delta.as_f64() });
        }
        Ok(())
    }
}

/// Right/left wheel angular rates [rad/s]; front and rear wheels on a side
/// share one rate.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WheelRates<T> {
    pub right: T,
    pub left: T,
}

impl<T: Real> WheelRates<T> {
    pub fn new(right: T, left: T) -> Self {
        Self { right, left }
    }

    pub fn splat(v: T) -> Self {
        Self::new(v, v)
    }

    pub fn to_array(self) -> [T; 2] {
        [self.right, self.left]
    }

    pub fn from_array(a: [T; 2]) -> Self {
        Self::new(a[0], a[1])
    }

    pub fn is_finite(&self) -> bool {
        self.right.is_finite() && self.left.is_finite()
    }

    pub fn map(self, mut f: impl FnMut(T) -> T) -> Self {
        Self::new(f(self.right), f(self.left))
    }

    pub fn cast<U: Real>(self) -> WheelRates<U> {
        WheelRates::new(U::lit(self.right.as_f64()), U::lit(self.left.as_f64()))
    }
}

/// First-order kinematic map `nu_b = J(r, c) * rates`; `v_y` is always zero.
pub fn body_twist<T: Real>(params: &PlatformParams<T>, rates: WheelRates<T>) -> Twist<T> {
    let half_r = params.wheel_radius * T::lit(0.5);
    Twist::body(
        half_r * (rates.right + rates.left),
        T::zero(),
        half_r / params.half_track * (rates.right - rates.left),
    )
}

#[inline]
fn logistic<T: Real>(s: T) -> T {
    if s >= T::zero() {
        T::one() / (T::one() + (-s).exp())
    } else {
        let e = s.exp();
        e / (T::one() + e)
    }
}

/// Smooth dead-zone gate `u * sigma(kappa * (|u| - delta))` and its
/// derivative with respect to `u`.
#[inline]
pub fn deadzone_gate<T: Real>(u: T, delta: T, kappa: T) -> (T, T) {
    let sigma = logistic(kappa * (u.abs() - delta));
    let value = u * sigma;
    let slope = sigma + u.abs() * kappa * sigma * (T::one() - sigma);
    (value, slope)
}

/// Applies the smooth dead-zone gate to both wheels.
pub fn smooth_deadzone<T: Real>(rates: WheelRates<T>, delta: T, kappa: T) -> WheelRates<T> {
    rates.map(|u| deadzone_gate(u, delta, kappa).0)
}

/// Continuous-time model `xdot = f(x, rates)`.
pub fn state_derivative<T: Real>(
    params: &PlatformParams<T>,
    pose: &Pose<T>,
    rates: WheelRates<T>,
    deadzone_enabled: bool,
) -> [T; 3] {
    let effective = if deadzone_enabled {
        smooth_deadzone(rates, params.deadzone_delta, params.deadzone_kappa)
    } else {
        rates
    };
    let body = body_twist(params, effective);
    match adjoint_transform(pose, &body) {
        Ok(world) => world.to_vector(),
        // Only reachable with a non-finite heading; propagate NaN so the
        // integrators report it.
        Err(_) => [T::nan(); 3],
    }
}

/// Pose-rate together with its partial derivatives.
#[derive(Debug, Clone, Copy)]
pub struct DerivativeJacobian<T> {
    pub value: [T; 3],
    /// `d f / d (x, y, alpha)`, row-major 3x3.
    pub d_pose: [[T; 3]; 3],
    /// `d f / d (rate_right, rate_left)`, row-major 3x2.
    pub d_rates: [[T; 2]; 3],
}

/// Kinematic model with its dead-zone option bound in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkidSteerModel<T> {
    pub params: PlatformParams<T>,
    pub deadzone_enabled: bool,
}

impl<T: Real> SkidSteerModel<T> {
    pub fn new(params: PlatformParams<T>, deadzone_enabled: bool) -> Self {
        Self { params, deadzone_enabled }
    }

    pub fn derivative(&self, pose: &Pose<T>, rates: WheelRates<T>) -> [T; 3] {
        state_derivative(&self.params, pose, rates, self.deadzone_enabled)
    }

    pub fn derivative_with_jacobian(&self, pose: &Pose<T>, rates: WheelRates<T>) -> DerivativeJacobian<T> {
        let p = &self.params;
        let (gr, dgr, gl, dgl) = if self.deadzone_enabled {
            let (gr, dgr) = deadzone_gate(rates.right, p.deadzone_delta, p.deadzone_kappa);
            let (gl, dgl) = deadzone_gate(rates.left, p.deadzone_delta, p.deadzone_kappa);
            (gr, dgr, gl, dgl)
        } else {
            (rates.right, T::one(), rates.left, T::one())
        };
        let half_r = p.wheel_radius * T::lit(0.5);
        let yaw_gain = half_r / p.half_track;
        let v = half_r * (gr + gl);
        let omega = yaw_gain * (gr - gl);
        let (s, c) = pose.alpha.sin_cos();
        let z = T::zero();
        DerivativeJacobian {
            value: [c * v, s * v, omega],
            d_pose: [[z, z, -s * v], [z, z, c * v], [z, z, z]],
            d_rates: [
                [c * half_r * dgr, c * half_r * dgl],
                [s * half_r * dgr, s * half_r * dgl],
                [yaw_gain * dgr, -yaw_gain * dgl],
            ],
        }
    }

    /// One integration step with rates held constant.
    pub fn step(&self, method: Integrator, pose: &Pose<T>, rates: WheelRates<T>, dt: T) -> Result<Pose<T>, ModelError> {
        integrate_step(method, pose, |x| self.derivative(x, rates), dt)
    }

    /// Discrete transition `F(x, u)` with its Jacobians `A = dF/dx`, `B = dF/du`.
    pub fn step_with_jacobian(&self, method: Integrator, pose: &Pose<T>, rates: WheelRates<T>, dt: T) -> StepJacobian<T> {
        let x0 = pose.to_vector();
        match method {
            Integrator::Euler => {
                let d = self.derivative_with_jacobian(pose, rates);
                let mut next = x0;
                let mut a = IDENTITY3();
                let mut b = [[T::zero(); 2]; 3];
                for i in 0..3 {
                    next[i] += dt * d.value[i];
                    for j in 0..3 {
                        a[i][j] += dt * d.d_pose[i][j];
                    }
                    for j in 0..2 {
                        b[i][j] = dt * d.d_rates[i][j];
                    }
                }
                StepJacobian { next, a, b }
            }
            Integrator::Rk4 => {
                let half = dt * T::lit(0.5);
                let offsets = [T::zero(), half, half, dt];
                let weights = [T::one(), T::lit(2.0), T::lit(2.0), T::one()];
                let mut next = x0;
                let mut a = IDENTITY3();
                let mut b = [[T::zero(); 2]; 3];
                let mut k_prev = [T::zero(); 3];
                let mut dk_dx_prev = [[T::zero(); 3]; 3];
                let mut dk_du_prev = [[T::zero(); 2]; 3];
                let sixth = dt / T::lit(6.0);
                for stage in 0..4 {
                    let h = offsets[stage];
                    let xs = [x0[0] + h * k_prev[0], x0[1] + h * k_prev[1], x0[2] + h * k_prev[2]];
                    let d = self.derivative_with_jacobian(&Pose::from_vector(xs), rates);
                    // d xs / dx = I + h dk_prev/dx ; d xs / du = h dk_prev/du
                    let mut dk_dx = [[T::zero(); 3]; 3];
                    let mut dk_du = [[T::zero(); 2]; 3];
                    for i in 0..3 {
                        for j in 0..3 {
                            let mut acc = d.d_pose[i][j];
                            for m in 0..3 {
                                acc += d.d_pose[i][m] * h * dk_dx_prev[m][j];
                            }
                            dk_dx[i][j] = acc;
                        }
                        for j in 0..2 {
                            let mut acc = d.d_rates[i][j];
                            for m in 0..3 {
                                acc += d.d_pose[i][m] * h * dk_du_prev[m][j];
                            }
                            dk_du[i][j] = acc;
                        }
                    }
                    let w = sixth * weights[stage];
                    for i in 0..3 {
                        next[i] += w * d.value[i];
                        for j in 0..3 {
                            a[i][j] += w * dk_dx[i][j];
                        }
                        for j in 0..2 {
                            b[i][j] += w * dk_du[i][j];
                        }
                    }
                    k_prev = d.value;
                    dk_dx_prev = dk_dx;
                    dk_du_prev = dk_du;
                }
                StepJacobian { next, a, b }
            }
        }
    }
}

#[allow(non_snake_case)]
#[inline]
fn IDENTITY3<T: Real>() -> [[T; 3]; 3] {
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

/// Discrete transition and its linearization.
#[derive(Debug, Clone, Copy)]
pub struct StepJacobian<T> {
    pub next: [T; 3],
    pub a: [[T; 3]; 3],
    pub b: [[T; 2]; 3],
}

/// Numeric integrator used both by the transcription and the plant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Integrator {
    #[default]
    Euler,
    Rk4,
}

/// Advances `pose` by `dt` using only evaluations of `xdot`.
pub fn integrate_step<T: Real, F>(method: Integrator, pose: &Pose<T>, xdot: F, dt: T) -> Result<Pose<T>, ModelError>
where
    F: Fn(&Pose<T>) -> [T; 3],
{
    if !(dt.is_finite() && dt > T::zero()) {
        return Err(ModelError::InvalidStep(dt.as_f64()));
    }
    let eval = |p: &Pose<T>| {
        let d = xdot(p);
        if d.iter().all(|v| v.is_finite()) {
            Ok(d)
        } else {
            Err(ModelError::NumericFailure { x: p.p[0].as_f64(), y: p.p[1].as_f64(), alpha: p.alpha.as_f64() })
        }
    };
    let x = pose.to_vector();
    let axpy = |h: T, k: &[T; 3]| Pose::from_vector([x[0] + h * k[0], x[1] + h * k[1], x[2] + h * k[2]]);
    match method {
        Integrator::Euler => {
            let k1 = eval(pose)?;
            Ok(axpy(dt, &k1))
        }
        Integrator::Rk4 => {
            let half = dt * T::lit(0.5);
            let k1 = eval(pose)?;
            let k2 = eval(&axpy(half, &k1))?;
            let k3 = eval(&axpy(half, &k2))?;
            let k4 = eval(&axpy(dt, &k3))?;
            let sixth = dt / T::lit(6.0);
            let two = T::lit(2.0);
            Ok(Pose::from_vector([
                x[0] + sixth * (k1[0] + two * k2[0] + two * k3[0] + k4[0]),
                x[1] + sixth * (k1[1] + two * k2[1] + two * k3[1] + k4[1]),
                x[2] + sixth * (k1[2] + two * k2[2] + two * k3[2] + k4[2]),
            ]))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn params() -> PlatformParams<f64> {
        PlatformParams { wheel_radius: 0.3, half_track: 1.0, ..Default::default() }
    }

    #[test]
    fn body_twist_examples() {
        let p = params();
        assert_eq!(body_twist(&p, WheelRates::new(1.0, 1.0)).to_vector(), [0.3, 0.0, 0.0]);
        assert_eq!(body_twist(&p, WheelRates::new(1.0, -1.0)).to_vector(), [0.0, 0.0, 0.3]);
        assert_eq!(body_twist(&p, WheelRates::new(0.0, 0.0)).to_vector(), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn validate_rejects_bad_params() {
        assert!(params().validate().is_ok());
        assert!(PlatformParams { wheel_radius: 0.0, ..params() }.validate().is_err());
        assert!(PlatformParams { half_track: -1.0, ..params() }.validate().is_err());
        assert!(PlatformParams { deadzone_kappa: 0.0, ..params() }.validate().is_err());
        assert!(PlatformParams { deadzone_delta: -0.1, ..params() }.validate().is_err());
    }

    #[test]
    fn state_derivative_examples() {
        let p = params();
        let d = state_derivative(&p, &Pose::identity(), WheelRates::new(1.0, 1.0), false);
        assert_eq!(d, [0.3, 0.0, 0.0]);
        let d = state_derivative(&p, &Pose::new(0.0, 0.0, FRAC_PI_2), WheelRates::new(1.0, 1.0), false);
        assert!(d[0].abs() < 1e-15 && (d[1] - 0.3).abs() < 1e-15 && d[2] == 0.0);
    }

    #[test]
    fn deadzone_attenuates_below_threshold() {
        let p = PlatformParams { deadzone_delta: 0.05, deadzone_kappa: 1.0e4, ..params() };
        let half = p.deadzone_delta / 2.0;
        let d = state_derivative(&p, &Pose::new(1.0, 2.0, 0.4), WheelRates::splat(half), true);
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        assert!(norm < p.wheel_radius * p.deadzone_delta / 2.0, "norm {norm}");
        // gate value at u = delta/2 is sigma(-kappa*delta/2), computed directly
        let expected = 0.3 * half / (1.0 + (1.0e4_f64 * 0.025).exp());
        assert!((norm - expected).abs() < 1e-18);
    }

    #[test]
    fn smooth_deadzone_examples() {
        let r = smooth_deadzone(WheelRates::<f64>::new(0.0, 10.0), 0.05, 100.0);
        assert_eq!(r.right, 0.0);
        assert!((r.left - 10.0).abs() / 10.0 < 1e-6);
        let r = smooth_deadzone(WheelRates::splat(0.05), 0.05, 100.0);
        assert_eq!(r.right, 0.025);
    }

    #[test]
    fn gate_slope_matches_finite_difference() {
        for &u in &[-0.3f64, -0.06, -0.01, 0.0, 0.02, 0.05, 0.07, 1.0] {
            let h = 1e-7;
            let fd = (deadzone_gate(u + h, 0.05, 100.0).0 - deadzone_gate(u - h, 0.05, 100.0).0) / (2.0 * h);
            let (_, slope) = deadzone_gate(u, 0.05, 100.0);
            assert!((fd - slope).abs() < 1e-6, "u={u}: {fd} vs {slope}");
        }
    }

    #[test]
    fn euler_examples() {
        let x = integrate_step(Integrator::Euler, &Pose::identity(), |_| [1.0, 0.0, 0.0], 0.1).unwrap();
        assert_eq!(x.to_vector(), [0.1, 0.0, 0.0]);
        let start = Pose::new(0.4, -0.2, 1.0);
        for method in [Integrator::Euler, Integrator::Rk4] {
            assert_eq!(integrate_step(method, &start, |_| [0.0; 3], 0.1).unwrap(), start);
        }
    }

    #[test]
    fn integrate_rejects_bad_inputs() {
        assert!(matches!(
            integrate_step(Integrator::Euler, &Pose::<f64>::identity(), |_| [0.0; 3], 0.0),
            Err(ModelError::InvalidStep(_))
        ));
        let err = integrate_step(Integrator::Rk4, &Pose::new(1.0, 2.0, 3.0), |_| [f64::NAN, 0.0, 0.0], 0.1).unwrap_err();
        assert_eq!(err, ModelError::NumericFailure { x: 1.0, y: 2.0, alpha: 3.0 });
    }

    #[test]
    fn rk4_matches_closed_form_arc() {
        let (v, w, dt) = (0.15, 0.025, 0.1);
        let f = |p: &Pose<f64>| [p.alpha.cos() * v, p.alpha.sin() * v, w];
        let mut x = Pose::identity();
        for _ in 0..10 {
            x = integrate_step(Integrator::Rk4, &x, f, dt).unwrap();
        }
        let t = 1.0;
        // circular arc from the origin heading along +x with radius v/w
        let radius = v / w;
        let ex = radius * (w * t).sin();
        let ey = radius * (1.0 - (w * t).cos());
        assert!((x.p[0] - ex).abs() < 1e-6 && (x.p[1] - ey).abs() < 1e-6);
        assert!((x.alpha - w * t).abs() < 1e-12);
    }

    #[test]
    fn euler_rk4_gap_is_second_order() {
        let f = |p: &Pose<f64>| [p.alpha.cos() * 0.8, p.alpha.sin() * 0.8, 0.6];
        let gap = |dt: f64| {
            let start = Pose::new(0.0, 0.0, 0.3);
            let e = integrate_step(Integrator::Euler, &start, f, dt).unwrap();
            let r = integrate_step(Integrator::Rk4, &start, f, dt).unwrap();
            (e.p[0] - r.p[0]).hypot(e.p[1] - r.p[1])
        };
        for dt in [0.4, 0.2, 0.1, 0.05] {
            assert!(gap(dt) / gap(dt / 2.0) >= 3.5, "dt={dt}");
        }
    }

    fn fd_check(method: Integrator, deadzone: bool) {
        let model = SkidSteerModel::new(params(), deadzone);
        let pose = Pose::new(0.3, -1.2, 0.9);
        let rates = WheelRates::new(0.45, 0.07);
        let dt = 0.1;
        let sj = model.step_with_jacobian(method, &pose, rates, dt);
        let plain = model.step(method, &pose, rates, dt).unwrap().to_vector();
        for i in 0..3 {
            assert!((plain[i] - sj.next[i]).abs() < 1e-15);
        }
        let h = 1e-6;
        for j in 0..3 {
            let mut xp = pose.to_vector();
            let mut xm = xp;
            xp[j] += h;
            xm[j] -= h;
            let fp = model.step(method, &Pose::from_vector(xp), rates, dt).unwrap().to_vector();
            let fm = model.step(method, &Pose::from_vector(xm), rates, dt).unwrap().to_vector();
            for i in 0..3 {
                assert!(((fp[i] - fm[i]) / (2.0 * h) - sj.a[i][j]).abs() < 1e-8);
            }
        }
        for j in 0..2 {
            let mut up = rates.to_array();
            let mut um = up;
            up[j] += h;
            um[j] -= h;
            let fp = model.step(method, &pose, WheelRates::from_array(up), dt).unwrap().to_vector();
            let fm = model.step(method, &pose, WheelRates::from_array(um), dt).unwrap().to_vector();
            for i in 0..3 {
                assert!(((fp[i] - fm[i]) / (2.0 * h) - sj.b[i][j]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn step_jacobians_match_finite_differences() {
        for method in [Integrator::Euler, Integrator::Rk4] {
            fd_check(method, false);
            fd_check(method, true);
        }
    }

    proptest! {
        #[test]
        fn body_twist_is_linear(r in -2.0f64..2.0, l in -2.0f64..2.0) {
            let p = params();
            let a = body_twist(&p, WheelRates::new(r, l)).to_vector();
            let b = body_twist(&p, WheelRates::new(2.0 * r, 2.0 * l)).to_vector();
            for i in 0..3 {
                prop_assert!((b[i] - 2.0 * a[i]).abs() < 1e-12);
            }
            prop_assert_eq!(a[1], 0.0);
        }

        #[test]
        fn deadzone_is_odd_and_contracting(u in -3.0f64..3.0, delta in 0.0f64..0.5, kappa in 1.0f64..500.0) {
            let (pos, _) = deadzone_gate(u, delta, kappa);
            let (neg, _) = deadzone_gate(-u, delta, kappa);
            prop_assert_eq!(pos, -neg);
            prop_assert!(pos.abs() <= u.abs());
            let (_, slope) = deadzone_gate(u, delta, kappa);
            prop_assert!(slope >= 0.0);
        }

        #[test]
        fn deadzone_vanishes_as_delta_shrinks(u in 0.01f64..3.0) {
            let (g, _) = deadzone_gate(u, 1e-9, 1e4);
            prop_assert!((g - u).abs() < 1e-6 * u.max(1.0) + u * 1e-30 + 1e-10);
        }
    }
}
