//! Run configuration file.
//!
//! A TOML document with the sections `[platform]`, `[horizon]`, `[weights]`,
//! `[bounds]`, `[trajectory]`, `[solver]`, `[network]`, `[controller]` and
//! `[plant]`. Every section and key is optional and falls back to the
//! library defaults; unknown sections or keys are rejected so typos do not
//! pass silently. Errors name the offending section and key.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;
use toml::{Table, Value};

use crate::controller::ControllerConfig;
use crate::plant::PlantConfig;
use crate::skidsteer::{Integrator, WheelRates};
use crate::trajectory::{TrajectoryKind, TrajectorySpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config syntax: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("unknown config section [{0}]")]
    UnknownSection(String),
    #[error("[{section}] is not a table")]
    NotATable { section: String },
    #[error("unknown key [{section}].{key}")]
    UnknownKey { section: String, key: String },
    #[error("[{section}].{key}: expected {expected}")]
    Type { section: String, key: String, expected: &'static str },
    #[error("[{section}].{key}: {message}")]
    Invalid { section: String, key: String, message: String },
    #[error("config is inconsistent: {0}")]
    Validation(String),
}

const SECTIONS: &[&str] = &["platform", "horizon", "weights", "bounds", "trajectory", "solver", "network", "controller", "plant"];

/// Everything a run needs: the controller and the simulated plant. The plant
/// shares the controller's platform geometry.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub controller: ControllerConfig,
    pub plant: PlantConfig,
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        text.parse()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.controller.validate().map_err(|e| ConfigError::Validation(e.to_string()))?;
        self.plant.validate().map_err(|e| ConfigError::Validation(e.to_string()))?;
        Ok(())
    }
}

impl std::str::FromStr for RunConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, ConfigError> {
        let doc: Table = text.parse()?;
        for name in doc.keys() {
            if !SECTIONS.contains(&name.as_str()) {
                return Err(ConfigError::UnknownSection(name.clone()));
            }
        }
        let mut cfg = RunConfig::default();
        let c = &mut cfg.controller;

        if let Some(mut s) = Section::open(&doc, "platform")? {
            let p = &mut c.platform;
            s.f64("wheel_radius", &mut p.wheel_radius)?;
            s.f64("half_track", &mut p.half_track)?;
            s.f64("half_wheelbase", &mut p.half_wheelbase)?;
            s.f64("deadzone_delta", &mut p.deadzone_delta)?;
            s.f64("deadzone_kappa", &mut p.deadzone_kappa)?;
            s.finish()?;
        }
        if let Some(mut s) = Section::open(&doc, "horizon")? {
            let h = &mut c.horizon;
            s.usize("steps", &mut h.steps)?;
            s.f64("dt", &mut h.dt)?;
            if let Some(name) = s.string("integrator")? {
                h.integrator = match name.as_str() {
                    "euler" => Integrator::Euler,
                    "rk4" => Integrator::Rk4,
                    _ => return Err(s.invalid("integrator", "expected \"euler\" or \"rk4\"")),
                };
            }
            s.bool("deadzone_in_model", &mut h.deadzone_in_model)?;
            s.finish()?;
        }
        if let Some(mut s) = Section::open(&doc, "weights")? {
            let w = &mut c.weights;
            s.array("q_x", &mut w.q_x)?;
            s.array("q_xdot", &mut w.q_xdot)?;
            s.array("r", &mut w.r)?;
            s.array("q_x_terminal", &mut w.q_x_terminal)?;
            s.array("q_xdot_terminal", &mut w.q_xdot_terminal)?;
            s.finish()?;
        }
        if let Some(mut s) = Section::open(&doc, "bounds")? {
            let b = &mut c.bounds;
            s.array("pose_min", &mut b.pose_min)?;
            s.array("pose_max", &mut b.pose_max)?;
            s.rates("rate_min", &mut b.rate_min)?;
            s.rates("rate_max", &mut b.rate_max)?;
            s.rates("accel_min", &mut b.accel_min)?;
            s.rates("accel_max", &mut b.accel_max)?;
            s.finish()?;
        }
        if let Some(mut s) = Section::open(&doc, "trajectory")? {
            c.trajectory = trajectory(&mut s)?;
            s.finish()?;
        }
        if let Some(mut s) = Section::open(&doc, "solver")? {
            // shared settings go to both solves; the budget keys are per mode
            for settings in [&mut c.solver, &mut c.refine] {
                s.f64("regularization", &mut settings.regularization)?;
                s.f64("initial_hessian_scale", &mut settings.initial_hessian_scale)?;
                s.f64("armijo", &mut settings.armijo)?;
                s.f64("backtrack", &mut settings.backtrack)?;
                s.usize("max_backtracks", &mut settings.max_backtracks)?;
                s.bool("second_order_correction", &mut settings.second_order_correction)?;
            }
            s.usize("max_iterations", &mut c.solver.max_iterations)?;
            s.f64("tolerance", &mut c.solver.tolerance)?;
            s.usize("refine_max_iterations", &mut c.refine.max_iterations)?;
            s.f64("refine_tolerance", &mut c.refine.tolerance)?;
            if c.solver.max_iterations == 0 {
                return Err(s.invalid("max_iterations", "must be at least 1"));
            }
            s.finish()?;
        }
        if let Some(mut s) = Section::open(&doc, "network")? {
            let n = &mut c.network;
            for (key, slot) in [("pose_addr", &mut n.pose_addr), ("rates_addr", &mut n.rates_addr), ("command_addr", &mut n.command_addr)] {
                if let Some(v) = s.string(key)? {
                    *slot = v;
                }
            }
            s.finish()?;
        }
        if let Some(mut s) = Section::open(&doc, "controller")? {
            s.f64("loop_period", &mut c.loop_period)?;
            s.f64("startup_timeout", &mut c.startup_timeout)?;
            s.usize("max_consecutive_failures", &mut c.max_consecutive_failures)?;
            s.f64("sim_time_scale", &mut c.sim_time_scale)?;
            s.finish()?;
        }
        cfg.plant.platform = cfg.controller.platform;
        if let Some(mut s) = Section::open(&doc, "plant")? {
            let p = &mut cfg.plant;
            s.f64("deadzone_threshold", &mut p.deadzone_threshold)?;
            s.f64("time_constant", &mut p.time_constant)?;
            s.f64("saturation", &mut p.saturation)?;
            s.f64("pose_noise_position", &mut p.pose_noise_position)?;
            s.f64("pose_noise_heading", &mut p.pose_noise_heading)?;
            s.f64("rate_noise", &mut p.rate_noise)?;
            s.f64("pose_rate_hz", &mut p.pose_rate_hz)?;
            s.f64("wheel_rate_hz", &mut p.wheel_rate_hz)?;
            s.f64("substep", &mut p.substep)?;
            let mut seed = p.seed as usize;
            s.usize("seed", &mut seed)?;
            p.seed = seed as u64;
            let mut noise = true;
            s.bool("noise", &mut noise)?;
            if !noise {
                p.pose_noise_position = 0.0;
                p.pose_noise_heading = 0.0;
                p.rate_noise = 0.0;
            }
            s.finish()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn trajectory(s: &mut Section<'_>) -> Result<TrajectorySpec<f64>, ConfigError> {
    let kind = match s.string("kind")?.as_deref() {
        None | Some("circle") => TrajectoryKind::Circle,
        Some("lemniscate") => TrajectoryKind::Lemniscate,
        Some("multi_lemniscate") => TrajectoryKind::MultiLemniscate,
        Some(_) => return Err(s.invalid("kind", "expected \"circle\", \"lemniscate\" or \"multi_lemniscate\"")),
    };
    let mut spec = match kind {
        TrajectoryKind::Circle => {
            let mut diameter = 12.0;
            s.f64("diameter", &mut diameter)?;
            let mut speed = 0.15;
            s.f64("speed", &mut speed)?;
            if !(speed.is_finite() && speed > 0.0) {
                return Err(s.invalid("speed", "must be positive"));
            }
            TrajectorySpec::circle_with_speed(diameter, speed)
        }
        _ => {
            let mut spec = TrajectorySpec::default_lemniscate();
            s.f64("width", &mut spec.extents[0])?;
            s.f64("height", &mut spec.extents[1])?;
            spec.kind = kind;
            spec
        }
    };
    if kind == TrajectoryKind::Circle && s.has("period") && s.has("speed") {
        return Err(s.invalid("period", "give either period or speed, not both"));
    }
    s.f64("period", &mut spec.period)?;
    let mut laps = spec.laps as usize;
    s.usize("laps", &mut laps)?;
    spec.laps = u32::try_from(laps).map_err(|_| s.invalid("laps", "too large"))?;
    s.f64("start_time", &mut spec.start_time)?;
    spec.validate().map_err(|e| s.invalid("kind", &e.to_string()))?;
    Ok(spec)
}

/// One section being consumed; `finish` rejects whatever was not read.
struct Section<'a> {
    name: &'static str,
    table: &'a Table,
    seen: Vec<&'static str>,
}

impl<'a> Section<'a> {
    fn open(doc: &'a Table, name: &'static str) -> Result<Option<Self>, ConfigError> {
        match doc.get(name) {
            None => Ok(None),
            Some(Value::Table(table)) => Ok(Some(Self { name, table, seen: Vec::new() })),
            Some(_) => Err(ConfigError::NotATable { section: name.into() }),
        }
    }

    fn has(&self, key: &str) -> bool {
        self.table.contains_key(key)
    }

    fn get(&mut self, key: &'static str) -> Option<&'a Value> {
        if !self.seen.contains(&key) {
            self.seen.push(key);
        }
        self.table.get(key)
    }

    fn type_error(&self, key: &str, expected: &'static str) -> ConfigError {
        ConfigError::Type { section: self.name.into(), key: key.into(), expected }
    }

    fn invalid(&self, key: &str, message: &str) -> ConfigError {
        ConfigError::Invalid { section: self.name.into(), key: key.into(), message: message.into() }
    }

    fn number(&self, key: &str, v: &Value) -> Result<f64, ConfigError> {
        match v {
            Value::Float(f) => Ok(*f),
            Value::Integer(i) => Ok(*i as f64),
            _ => Err(self.type_error(key, "a number")),
        }
    }

    fn f64(&mut self, key: &'static str, slot: &mut f64) -> Result<(), ConfigError> {
        if let Some(v) = self.get(key) {
            let x = self.number(key, v)?;
            if x.is_nan() {
                return Err(self.invalid(key, "must not be NaN"));
            }
            *slot = x;
        }
        Ok(())
    }

    fn usize(&mut self, key: &'static str, slot: &mut usize) -> Result<(), ConfigError> {
        match self.get(key) {
            None => Ok(()),
            Some(Value::Integer(i)) => {
                *slot = usize::try_from(*i).map_err(|_| self.invalid(key, "must be non-negative"))?;
                Ok(())
            }
            Some(_) => Err(self.type_error(key, "a non-negative integer")),
        }
    }

    fn bool(&mut self, key: &'static str, slot: &mut bool) -> Result<(), ConfigError> {
        match self.get(key) {
            None => Ok(()),
            Some(Value::Boolean(b)) => {
                *slot = *b;
                Ok(())
            }
            Some(_) => Err(self.type_error(key, "true or false")),
        }
    }

    fn string(&mut self, key: &'static str) -> Result<Option<String>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(self.type_error(key, "a string")),
        }
    }

    /// Fixed-length numeric array; a single number fills every entry.
    fn array<const K: usize>(&mut self, key: &'static str, slot: &mut [f64; K]) -> Result<(), ConfigError> {
        let Some(v) = self.get(key) else { return Ok(()) };
        match v {
            Value::Array(items) => {
                if items.len() != K {
                    return Err(self.invalid(key, &format!("expected {K} entries, got {}", items.len())));
                }
                for (dst, item) in slot.iter_mut().zip(items) {
                    *dst = self.number(key, item)?;
                }
            }
            other => *slot = [self.number(key, other)?; K],
        }
        if slot.iter().any(|x| x.is_nan()) {
            return Err(self.invalid(key, "must not be NaN"));
        }
        Ok(())
    }

    /// `[right, left]` pair or one number for both wheels.
    fn rates(&mut self, key: &'static str, slot: &mut WheelRates<f64>) -> Result<(), ConfigError> {
        let mut pair = [slot.right, slot.left];
        self.array(key, &mut pair)?;
        *slot = WheelRates::new(pair[0], pair[1]);
        Ok(())
    }

    fn finish(self) -> Result<(), ConfigError> {
        match self.table.keys().find(|k| !self.seen.contains(&k.as_str())) {
            Some(k) => Err(ConfigError::UnknownKey { section: self.name.into(), key: k.clone() }),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        let cfg: RunConfig = "".parse().unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn sections_override_defaults() {
        let cfg: RunConfig = r#"
            [platform]
            wheel_radius = 0.25
            [horizon]
            steps = 20
            dt = 0.05
            integrator = "rk4"
            [bounds]
            rate_max = [0.9, 0.7]
            accel_max = 0.3
            [trajectory]
            kind = "multi_lemniscate"
            laps = 3
            [solver]
            max_iterations = 2
            refine_tolerance = 1e-8
            [plant]
            noise = false
            time_constant = 0
        "#
        .parse()
        .unwrap();
        let c = &cfg.controller;
        assert_eq!(c.platform.wheel_radius, 0.25);
        assert_eq!(cfg.plant.platform.wheel_radius, 0.25);
        assert_eq!((c.horizon.steps, c.horizon.dt, c.horizon.integrator), (20, 0.05, Integrator::Rk4));
        assert_eq!(c.bounds.rate_max, WheelRates::new(0.9, 0.7));
        assert_eq!(c.bounds.accel_max, WheelRates::splat(0.3));
        assert_eq!(c.trajectory.kind, TrajectoryKind::MultiLemniscate);
        assert_eq!(c.trajectory.laps, 3);
        assert_eq!(c.solver.max_iterations, 2);
        assert_eq!(c.refine.tolerance, 1e-8);
        assert_eq!(cfg.plant.rate_noise, 0.0);
        assert_eq!(cfg.plant.time_constant, 0.0);
    }

    #[test]
    fn infinite_pose_bounds_are_accepted() {
        let cfg: RunConfig = "[bounds]\npose_min = [-inf, -5, -inf]\n".parse().unwrap();
        assert_eq!(cfg.controller.bounds.pose_min[1], -5.0);
        assert!(cfg.controller.bounds.pose_min[0].is_infinite());
    }

    #[test]
    fn errors_name_section_and_key() {
        let err = "[horizon]\nstepz = 3\n".parse::<RunConfig>().unwrap_err();
        assert!(matches!(&err, ConfigError::UnknownKey { section, key } if section == "horizon" && key == "stepz"), "{err}");
        let err = "[weights]\nq_x = \"big\"\n".parse::<RunConfig>().unwrap_err();
        assert_eq!(err.to_string(), "[weights].q_x: expected a number");
        let err = "[weights]\nr = [1, 2, 3]\n".parse::<RunConfig>().unwrap_err();
        assert_eq!(err.to_string(), "[weights].r: expected 2 entries, got 3");
        let err = "[solver]\nmax_iterations = -1\n".parse::<RunConfig>().unwrap_err();
        assert!(err.to_string().starts_with("[solver].max_iterations"), "{err}");
        let err = "[wheels]\nx = 1\n".parse::<RunConfig>().unwrap_err();
        assert!(matches!(err, ConfigError::UnknownSection(s) if s == "wheels"));
    }

    #[test]
    fn circle_speed_sets_period() {
        let cfg: RunConfig = "[trajectory]\ndiameter = 10\nspeed = 0.2\n".parse().unwrap();
        let t = cfg.controller.trajectory;
        assert!((t.period - std::f64::consts::PI * 10.0 / 0.2).abs() < 1e-12);
        assert!("[trajectory]\nspeed = 0.2\nperiod = 100\n".parse::<RunConfig>().is_err());
    }

    #[test]
    fn inconsistent_values_are_rejected() {
        let err = "[bounds]\nrate_max = inf\n".parse::<RunConfig>().unwrap_err();
        assert!(matches!(err, ConfigError::Validation(_)), "{err}");
    }

    #[test]
    fn missing_file_names_path() {
        let err = RunConfig::from_file("/nonexistent/run.toml").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/run.toml"));
    }
}
