//! Closed-form reference trajectories on SE(2) with analytic rates.

use std::f64::consts::PI;

use thiserror::Error;

use crate::scalar::Real;
use crate::se2::{unwrap_near, Pose};
use crate::skidsteer::{PlatformParams, WheelRates};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrajectoryError {
    #[error("invalid trajectory spec: {0}")]
    InvalidSpec(&'static str),
    #[error("reference time must be finite and non-negative, got {0}")]
    InvalidTime(f64),
    #[error("reference needs wheel rates ({right:.4}, {left:.4}) rad/s at t = {t:.2} s, outside [{min:.3}, {max:.3}]")]
    Infeasible { t: f64, right: f64, left: f64, min: f64, max: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrajectoryKind {
    Circle,
    Lemniscate,
    MultiLemniscate,
}

/// Parameters of a periodic reference.
///
/// `extents` is `[diameter, diameter]` for circles and the `[width, height]`
/// bounding box for lemniscates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySpec<T> {
    pub kind: TrajectoryKind,
    pub extents: [T; 2],
    pub period: T,
    pub laps: u32,
    pub start_time: T,
}

/// Reference pose and its time derivative `[xdot, ydot, alphadot]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceSample<T> {
    pub pose: Pose<T>,
    pub rate: [T; 3],
}

impl<T: Real> TrajectorySpec<T> {
    pub fn circle(diameter: T, period: T) -> Self {
        Self { kind: TrajectoryKind::Circle, extents: [diameter, diameter], period, laps: 1, start_time: T::zero() }
    }

    /// Circle traversed at constant `speed` [m/s].
    pub fn circle_with_speed(diameter: T, speed: T) -> Self {
        Self::circle(diameter, T::lit(PI) * diameter / speed)
    }

    pub fn lemniscate(width: T, height: T, period: T) -> Self {
        Self { kind: TrajectoryKind::Lemniscate, extents: [width, height], period, laps: 1, start_time: T::zero() }
    }

    pub fn multi_lemniscate(width: T, height: T, period: T, laps: u32) -> Self {
        Self { kind: TrajectoryKind::MultiLemniscate, extents: [width, height], period, laps, start_time: T::zero() }
    }

    /// 12 m circle at 0.15 m/s.
    pub fn default_circle() -> Self {
        Self::circle_with_speed(T::lit(12.0), T::lit(0.15))
    }

    /// 19 m x 10 m figure eight with a 400 s period.
    pub fn default_lemniscate() -> Self {
        Self::lemniscate(T::lit(19.0), T::lit(10.0), T::lit(400.0))
    }

    pub fn with_laps(mut self, laps: u32) -> Self {
        self.laps = laps;
        self
    }

    pub fn with_start_time(mut self, start_time: T) -> Self {
        self.start_time = start_time;
        self
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        if !(self.period.is_finite() && self.period > T::zero()) {
            return Err(TrajectoryError::InvalidSpec("period must be positive"));
        }
        if !self.extents.iter().all(|e| e.is_finite() && *e > T::zero()) {
            return Err(TrajectoryError::InvalidSpec("extents must be positive"));
        }
        if self.laps == 0 {
            return Err(TrajectoryError::InvalidSpec("laps must be at least 1"));
        }
        if !self.start_time.is_finite() {
            return Err(TrajectoryError::InvalidSpec("start_time must be finite"));
        }
        Ok(())
    }

    /// Mission length: `laps` periods after `start_time`.
    pub fn duration(&self) -> T {
        self.start_time + self.period * T::lit(f64::from(self.laps))
    }

    /// Samples the reference at mission time `t`.
    pub fn sample(&self, t: T) -> Result<ReferenceSample<T>, TrajectoryError> {
        if !(t.is_finite() && t >= T::zero()) {
            return Err(TrajectoryError::InvalidTime(t.as_f64()));
        }
        self.validate()?;
        let tau = t - self.start_time;
        let omega = T::lit(2.0 * PI) / self.period;
        let theta = omega * tau;
        let (s, c) = theta.sin_cos();
        Ok(match self.kind {
            TrajectoryKind::Circle => {
                let radius = self.extents[0] * T::lit(0.5);
                let speed = radius * omega;
                ReferenceSample {
                    pose: Pose::new(radius * c, radius * s, theta + T::lit(PI / 2.0)),
                    rate: [-speed * s, speed * c, omega],
                }
            }
            TrajectoryKind::Lemniscate | TrajectoryKind::MultiLemniscate => {
                // Gerono figure eight: x = A sin(theta), y = B sin(theta) cos(theta).
                let a = self.extents[0] * T::lit(0.5);
                let b = self.extents[1];
                let (s2, c2) = (theta + theta).sin_cos();
                let vx = a * omega * c;
                let vy = b * omega * c2;
                let ax = -a * omega * omega * s;
                let ay = -(b + b) * omega * omega * s2;
                let mut heading = vy.atan2(vx);
                // Branch (-3pi/2, pi/2] keeps the heading continuous: the
                // velocity only points along -y where x-velocity vanishes.
                if heading > T::lit(PI / 2.0) {
                    heading -= T::lit(2.0 * PI);
                }
                let speed_sq = vx * vx + vy * vy;
                ReferenceSample {
                    pose: Pose::new(a * s, b * T::lit(0.5) * s2, heading),
                    rate: [vx, vy, (vx * ay - vy * ax) / speed_sq],
                }
            }
        })
    }

    /// Samples `steps + 1` references at `t0 + k dt` with headings unwrapped
    /// along the horizon.
    pub fn horizon(&self, t0: T, steps: usize, dt: T) -> Result<Vec<ReferenceSample<T>>, TrajectoryError> {
        let mut out = Vec::with_capacity(steps + 1);
        self.horizon_into(t0, steps, dt, &mut out)?;
        Ok(out)
    }

    pub fn horizon_into(&self, t0: T, steps: usize, dt: T, out: &mut Vec<ReferenceSample<T>>) -> Result<(), TrajectoryError> {
        if steps == 0 {
            return Err(TrajectoryError::InvalidSpec("horizon needs at least one step"));
        }
        if !(dt.is_finite() && dt > T::zero()) {
            return Err(TrajectoryError::InvalidSpec("horizon step must be positive"));
        }
        out.clear();
        let mut prev_alpha: Option<T> = None;
        for k in 0..=steps {
            let mut sample = self.sample(t0 + dt * T::lit(k as f64))?;
            if let Some(prev) = prev_alpha {
                sample.pose.alpha = unwrap_near(sample.pose.alpha, prev);
            }
            prev_alpha = Some(sample.pose.alpha);
            out.push(sample);
        }
        Ok(())
    }
}

/// Wheel rates that reproduce the reference velocity exactly (no dead zone).
pub fn reference_wheel_rates<T: Real>(params: &PlatformParams<T>, sample: &ReferenceSample<T>) -> WheelRates<T> {
    let (s, c) = sample.pose.alpha.sin_cos();
    let forward = c * sample.rate[0] + s * sample.rate[1];
    let turn = params.half_track * sample.rate[2];
    WheelRates::new((forward + turn) / params.wheel_radius, (forward - turn) / params.wheel_radius)
}

/// Checks on a dense grid over one period that the wheel rates needed to
/// follow the reference stay within `[min, max]`.
pub fn check_feasibility<T: Real>(
    spec: &TrajectorySpec<T>,
    params: &PlatformParams<T>,
    min: WheelRates<T>,
    max: WheelRates<T>,
) -> Result<(), TrajectoryError> {
    spec.validate()?;
    const SAMPLES: usize = 4096;
    for i in 0..SAMPLES {
        let t = spec.start_time.max(T::zero()) + spec.period * T::lit(i as f64 / SAMPLES as f64);
        let sample = spec.sample(t)?;
        let need = reference_wheel_rates(params, &sample);
        let ok = need.right >= min.right && need.right <= max.right && need.left >= min.left && need.left <= max.left;
        if !ok {
            return Err(TrajectoryError::Infeasible {
                t: t.as_f64(),
                right: need.right.as_f64(),
                left: need.left.as_f64(),
                min: min.right.min(min.left).as_f64(),
                max: max.right.max(max.left).as_f64(),
            });
        }
    }
    Ok(())
}
