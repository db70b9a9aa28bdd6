//! Ground-truth plant: hard dead zone, saturation and first-order actuator
//! lag on each wheel, true kinematics, and noisy sensor emission.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::se2::{wrap_angle, Pose};
use crate::skidsteer::{body_twist, integrate_step, state_derivative, Integrator, PlatformParams, WheelRates};

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("invalid plant config: {0}")]
    Config(String),
    #[error("sine test needs positive amplitude, period and duration")]
    SineArgs,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantConfig {
    pub platform: PlatformParams<f64>,
    /// Commands with magnitude at or below this produce no motion [rad/s].
    pub deadzone_threshold: f64,
    /// Actuator time constant [s]; zero means the rate follows instantly.
    pub time_constant: f64,
    pub saturation: f64,
    pub pose_noise_position: f64,
    pub pose_noise_heading: f64,
    pub rate_noise: f64,
    pub pose_rate_hz: f64,
    pub wheel_rate_hz: f64,
    pub seed: u64,
    /// Integration substep [s].
    pub substep: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            platform: PlatformParams::default(),
            deadzone_threshold: 0.08,
            time_constant: 0.15,
            saturation: 1.0,
            pose_noise_position: 0.01,
            pose_noise_heading: 0.005,
            rate_noise: 0.005,
            pose_rate_hz: 20.0,
            wheel_rate_hz: 1000.0,
            seed: 7,
            substep: 1e-3,
        }
    }
}

impl PlantConfig {
    /// Noise off, dead zone off, no lag: the plant then follows the
    /// prediction model.
    pub fn ideal(platform: PlatformParams<f64>) -> Self {
        Self {
            platform,
            deadzone_threshold: 0.0,
            time_constant: 0.0,
            pose_noise_position: 0.0,
            pose_noise_heading: 0.0,
            rate_noise: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        self.platform.validate().map_err(|e| PlantError::Config(e.to_string()))?;
        let non_negative = [
            ("deadzone_threshold", self.deadzone_threshold),
            ("time_constant", self.time_constant),
            ("pose_noise_position", self.pose_noise_position),
            ("pose_noise_heading", self.pose_noise_heading),
            ("rate_noise", self.rate_noise),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(PlantError::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        for (name, v) in [("saturation", self.saturation), ("pose_rate_hz", self.pose_rate_hz), ("wheel_rate_hz", self.wheel_rate_hz), ("substep", self.substep)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(PlantError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let fastest = self.pose_rate_hz.max(self.wheel_rate_hz);
        if self.substep > 1.0 / fastest + 1e-15 {
            return Err(PlantError::Config(format!("substep {} s exceeds the fastest sensor period {} s", self.substep, 1.0 / fastest)));
        }
        Ok(())
    }

    fn period_ns(hz: f64) -> u64 {
        (1e9 / hz).round() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantState {
    pub pose: Pose<f64>,
    pub rates: WheelRates<f64>,
    pub command: WheelRates<f64>,
    pub clock_ns: u64,
}

impl PlantState {
    pub fn at_rest(pose: Pose<f64>) -> Self {
        Self { pose, rates: WheelRates::splat(0.0), command: WheelRates::splat(0.0), clock_ns: 0 }
    }
}

/// Command actually reaching the wheel: saturated, then zero at or below
/// the dead-zone threshold.
pub fn effective_command(config: &PlantConfig, command: f64) -> f64 {
    let c = if command.is_finite() { command.clamp(-config.saturation, config.saturation) } else { 0.0 };
    if c.abs() <= config.deadzone_threshold {
        0.0
    } else {
        c
    }
}

fn wheel_update(config: &PlantConfig, rate: f64, command: f64, h: f64) -> f64 {
    let target = effective_command(config, command);
    // inside the dead zone the wheel is held by friction
    if target == 0.0 {
        return 0.0;
    }
    if config.time_constant == 0.0 {
        return target;
    }
    let next = rate + (target - rate) * (-(-h / config.time_constant).exp_m1());
    next.clamp(-config.saturation, config.saturation)
}

/// Advances the plant by `dt` seconds under a constant `command`, in
/// substeps no longer than `config.substep`.
pub fn plant_step(config: &PlantConfig, state: &PlantState, command: WheelRates<f64>, dt: f64) -> PlantState {
    assert!(dt.is_finite() && dt > 0.0, "plant step must be positive, got {dt}");
    let substeps = (dt / config.substep - 1e-9).ceil().max(1.0) as usize;
    let h = dt / substeps as f64;
    let mut s = *state;
    s.command = command;
    for _ in 0..substeps {
        s.rates = WheelRates::new(wheel_update(config, s.rates.right, command.right, h), wheel_update(config, s.rates.left, command.left, h));
        if s.rates.right != 0.0 || s.rates.left != 0.0 {
            let rates = s.rates;
            s.pose = integrate_step(Integrator::Rk4, &s.pose, |p| state_derivative(&config.platform, p, rates, false), h).unwrap_or(s.pose);
        }
    }
    s.clock_ns += (dt * 1e9).round() as u64;
    s
}

/// A timestamped measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stamped<T> {
    pub value: T,
    pub stamp_ns: u64,
}

/// Emits noisy pose and wheel-rate measurements on their channel periods.
#[derive(Debug, Clone)]
pub struct SensorEmitter {
    rng: ChaCha8Rng,
    pose_period_ns: u64,
    rate_period_ns: u64,
    next_pose_ns: u64,
    next_rate_ns: u64,
    position: Normal<f64>,
    heading: Normal<f64>,
    rate: Normal<f64>,
}

impl SensorEmitter {
    pub fn new(config: &PlantConfig) -> Self {
        let normal = |std: f64| Normal::new(0.0, std).expect("noise std validated as finite and non-negative");
        Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            pose_period_ns: PlantConfig::period_ns(config.pose_rate_hz),
            rate_period_ns: PlantConfig::period_ns(config.wheel_rate_hz),
            next_pose_ns: 0,
            next_rate_ns: 0,
            position: normal(config.pose_noise_position),
            heading: normal(config.pose_noise_heading),
            rate: normal(config.rate_noise),
        }
    }

    /// Emits any measurement whose channel period boundary has been reached
    /// at `state.clock_ns`. Headings are wrapped to `(-pi, pi]`. The wheel
    /// encoder reads exactly zero on a stationary wheel.
    pub fn emit(&mut self, state: &PlantState) -> (Option<Stamped<Pose<f64>>>, Option<Stamped<WheelRates<f64>>>) {
        let now = state.clock_ns;
        let mut pose = None;
        if now >= self.next_pose_ns {
            let p = state.pose;
            let alpha = p.alpha + self.heading.sample(&mut self.rng);
            let value = Pose::new(
                p.x() + self.position.sample(&mut self.rng),
                p.y() + self.position.sample(&mut self.rng),
                wrap_angle(alpha).unwrap_or(alpha),
            );
            pose = Some(Stamped { value, stamp_ns: now });
            self.next_pose_ns += self.pose_period_ns * ((now - self.next_pose_ns) / self.pose_period_ns + 1);
        }
        let mut rates = None;
        if now >= self.next_rate_ns {
            let mut noisy = |r: f64| if r == 0.0 { 0.0 } else { r + self.rate.sample(&mut self.rng) };
            let value = WheelRates::new(noisy(state.rates.right), noisy(state.rates.left));
            rates = Some(Stamped { value, stamp_ns: now });
            self.next_rate_ns += self.rate_period_ns * ((now - self.next_rate_ns) / self.rate_period_ns + 1);
        }
        (pose, rates)
    }
}

/// Ground-truth CSV row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub t_ns: u64,
    pub x: f64,
    pub y: f64,
    pub alpha: f64,
    pub rate_r: f64,
    pub rate_l: f64,
}

impl From<&PlantState> for TruthRow {
    fn from(s: &PlantState) -> Self {
        Self { t_ns: s.clock_ns, x: s.pose.x(), y: s.pose.y(), alpha: s.pose.alpha, rate_r: s.rates.right, rate_l: s.rates.left }
    }
}

pub fn write_truth(path: &Path, rows: &[TruthRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One sample of the open-loop sine test: the command held over the
/// preceding substep and the wheel linear velocity measured at its end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SineSample {
    pub t_ns: u64,
    pub reference: f64,
    pub measured: f64,
}

/// Commands `amplitude · sin(2πt/period)` to both wheels from rest and
/// records reference and measured wheel linear velocity at every wheel-rate
/// sample.
pub fn open_loop_sine_test(config: &PlantConfig, amplitude: f64, period: f64, duration: f64) -> Result<Vec<SineSample>, PlantError> {
    if !(amplitude > 0.0 && period > 0.0 && duration > 0.0) {
        return Err(PlantError::SineArgs);
    }
    config.validate()?;
    let mut emitter = SensorEmitter::new(config);
    let mut state = PlantState::at_rest(Pose::identity());
    let h = 1.0 / config.wheel_rate_hz;
    let steps = (duration / h).round() as usize;
    let r = config.platform.wheel_radius;
    let mut out = Vec::with_capacity(steps);
    emitter.emit(&state);
    for k in 0..steps {
        let cmd = amplitude * (2.0 * std::f64::consts::PI * k as f64 * h / period).sin();
        state = plant_step(config, &state, WheelRates::splat(cmd), h);
        if let (_, Some(m)) = emitter.emit(&state) {
            out.push(SineSample { t_ns: m.stamp_ns, reference: r * cmd, measured: r * m.value.right });
        }
    }
    Ok(out)
}

pub fn write_sine(path: &Path, samples: &[SineSample]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for s in samples {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

/// World-frame planar velocity implied by measured wheel rates and heading.
pub fn measured_velocity(platform: &PlatformParams<f64>, rates: WheelRates<f64>, heading: f64) -> [f64; 2] {
    let v = body_twist(platform, rates).v[0];
    let (s, c) = heading.sin_cos();
    [v * c, v * s]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skidsteer::SkidSteerModel;

    #[test]
    fn sub_threshold_command_does_not_move() {
        let cfg = PlantConfig::default();
        let start = Pose::new(1.0, 2.0, 0.3);
        let mut s = PlantState::at_rest(start);
        for _ in 0..1000 {
            s = plant_step(&cfg, &s, WheelRates::new(0.08, -0.05), 0.01);
        }
        assert_eq!(s.pose, start);
        assert_eq!(s.rates, WheelRates::splat(0.0));
    }

    #[test]
    fn first_order_step_response() {
        let cfg = PlantConfig { time_constant: 0.2, ..PlantConfig::default() };
        let s = plant_step(&cfg, &PlantState::at_rest(Pose::identity()), WheelRates::splat(0.5), 0.2);
        let expected = 0.5 * (1.0 - (-1.0f64).exp());
        assert!((s.rates.right - expected).abs() < 1e-12, "{}", s.rates.right);
        assert!((expected - 0.316).abs() < 1e-3);
    }

    #[test]
    fn equal_commands_drive_straight() {
        let cfg = PlantConfig::default();
        let mut s = PlantState::at_rest(Pose::new(0.0, 0.0, 0.7));
        for _ in 0..500 {
            s = plant_step(&cfg, &s, WheelRates::splat(0.5), 0.01);
        }
        assert_eq!(s.pose.alpha, 0.7);
        let bearing = s.pose.y().atan2(s.pose.x());
        assert!((bearing - 0.7).abs() < 1e-12);
    }

    #[test]
    fn zero_command_keeps_pose_exactly() {
        let cfg = PlantConfig { time_constant: 0.0, ..PlantConfig::default() };
        let mut s = PlantState::at_rest(Pose::new(3.0, -1.0, 2.0));
        s = plant_step(&cfg, &s, WheelRates::splat(0.6), 0.5);
        let moved = s.pose;
        for _ in 0..10_000 {
            s = plant_step(&cfg, &s, WheelRates::splat(0.0), 0.01);
        }
        assert_eq!(s.pose, moved);
    }

    #[test]
    fn ideal_plant_matches_prediction_model() {
        let params = PlatformParams::default();
        let cfg = PlantConfig::ideal(params);
        let model = SkidSteerModel::new(params, false);
        let pose = Pose::new(0.5, -0.2, 1.1);
        for (r, l) in [(0.3, 0.7), (0.8, 0.1), (0.45, 0.45)] {
            let u = WheelRates::new(r, l);
            let s = plant_step(&cfg, &PlantState::at_rest(pose), u, 0.1);
            let pred = model.step(Integrator::Rk4, &pose, u, 0.1).unwrap();
            for (a, b) in s.pose.to_vector().iter().zip(pred.to_vector()) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn one_second_of_messages() {
        let cfg = PlantConfig::default();
        let mut em = SensorEmitter::new(&cfg);
        let mut s = PlantState::at_rest(Pose::identity());
        let (mut poses, mut rates) = (0, 0);
        for _ in 0..1000 {
            let (p, r) = em.emit(&s);
            poses += p.is_some() as usize;
            rates += r.is_some() as usize;
            s = plant_step(&cfg, &s, WheelRates::splat(0.5), 1e-3);
        }
        assert_eq!((poses, rates), (20, 1000));
    }

    #[test]
    fn noiseless_measurements_equal_truth_and_seed_repeats() {
        let mut cfg = PlantConfig::ideal(PlatformParams::default());
        let s = plant_step(&cfg, &PlantState::at_rest(Pose::new(1.0, 1.0, 0.2)), WheelRates::new(0.3, 0.6), 0.3);
        let (p, r) = SensorEmitter::new(&cfg).emit(&s);
        assert_eq!(p.unwrap().value, s.pose);
        assert_eq!(r.unwrap().value, s.rates);
        cfg = PlantConfig::default();
        let (mut a, mut b) = (SensorEmitter::new(&cfg), SensorEmitter::new(&cfg));
        assert_eq!(a.emit(&s), b.emit(&s));
    }

    #[test]
    fn pose_noise_statistics() {
        let cfg = PlantConfig::default();
        let mut em = SensorEmitter::new(&cfg);
        let mut s = PlantState::at_rest(Pose::new(0.0, 0.0, 0.0));
        let n = 100_000;
        let (mut sx, mut sa) = (0.0, 0.0);
        for _ in 0..n {
            let (p, _) = em.emit(&s);
            let p = p.unwrap().value;
            sx += p.x() * p.x();
            sa += p.alpha * p.alpha;
            s.clock_ns += 50_000_000;
        }
        let (stdx, stda) = ((sx / n as f64).sqrt(), (sa / n as f64).sqrt());
        assert!((stdx / 0.01 - 1.0).abs() < 0.05, "{stdx}");
        assert!((stda / 0.005 - 1.0).abs() < 0.05, "{stda}");
    }

    #[test]
    fn sine_test_examples() {
        let cfg = PlantConfig::default();
        let below = open_loop_sine_test(&cfg, 0.07, 2.0, 4.0).unwrap();
        assert!(below.iter().all(|s| s.measured == 0.0));
        let lagless = PlantConfig { time_constant: 0.0, rate_noise: 0.0, ..cfg };
        let r = cfg.platform.wheel_radius;
        for s in open_loop_sine_test(&lagless, 0.3, 2.0, 4.0).unwrap() {
            let expected = r * effective_command(&lagless, s.reference / r);
            assert!((s.measured - expected).abs() < 1e-14, "{} vs {expected}", s.measured);
        }
    }
}
