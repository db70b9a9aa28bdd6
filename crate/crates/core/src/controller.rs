//! Real-time NMPC pipeline: sensor mailbox, warm-started single-iteration
//! solve, bounded command output and per-iteration timing records.

use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ocp::{build_nlp, Bounds, HorizonConfig, OcpError, OcpProblem, Weights};
use crate::se2::{unwrap_near, Pose};
use crate::skidsteer::{PlatformParams, WheelRates};
use crate::solver::{solve, warm_start_shift, GoldfarbIdnani, NlpProblem, SolveStatus, SolverError, SolverSettings, SolverState};
use crate::telemetry::{LogRow, TelemetryQueue};
use crate::trajectory::{reference_wheel_rates, ReferenceSample, TrajectoryError, TrajectorySpec};

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("startup failed: {0}")]
    Startup(String),
    #[error("controller halted after {0} consecutive solver failures")]
    Halt(usize),
    #[error("invalid controller config: {0}")]
    Config(String),
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("telemetry output: {0}")]
    Io(#[from] io::Error),
    #[error("telemetry output: {0}")]
    Csv(#[from] csv::Error),
}

/// UDP endpoints of the deployment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    /// Where the controller listens for pose datagrams.
    pub pose_addr: String,
    /// Where the controller listens for wheel-rate datagrams.
    pub rates_addr: String,
    /// Where the plant listens for commands.
    pub command_addr: String,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { pose_addr: "127.0.0.1:47001".into(), rates_addr: "127.0.0.1:47002".into(), command_addr: "127.0.0.1:47003".into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub horizon: HorizonConfig<f64>,
    pub weights: Weights<f64>,
    pub bounds: Bounds<f64>,
    pub platform: PlatformParams<f64>,
    pub trajectory: TrajectorySpec<f64>,
    /// Settings of the online (per-step) solve.
    pub solver: SolverSettings<f64>,
    /// Settings of the initial high-accuracy solve.
    pub refine: SolverSettings<f64>,
    pub loop_period: f64,
    pub startup_timeout: f64,
    pub max_consecutive_failures: usize,
    /// Wall-clock speed-up applied by the threaded loop.
    pub sim_time_scale: f64,
    pub network: NetworkConfig,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            horizon: HorizonConfig::default(),
            weights: Weights::default(),
            bounds: Bounds::default(),
            platform: PlatformParams::default(),
            trajectory: TrajectorySpec::default_circle(),
            solver: SolverSettings::real_time(),
            refine: SolverSettings::refine(),
            loop_period: 1e-3,
            startup_timeout: 5.0,
            max_consecutive_failures: 30,
            sim_time_scale: 1.0,
            network: NetworkConfig::default(),
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        self.horizon.validate()?;
        self.weights.validate()?;
        self.bounds.validate()?;
        self.trajectory.validate()?;
        self.platform.validate().map_err(|e| ControllerError::Config(e.to_string()))?;
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.loop_period) {
            return Err(ControllerError::Config("loop period must be positive".into()));
        }
        if !positive(self.sim_time_scale) {
            return Err(ControllerError::Config("sim time scale must be positive".into()));
        }
        if !(self.solver.tolerance > 0.0 && self.solver.max_iterations >= 1 && self.refine.tolerance > 0.0 && self.refine.max_iterations >= 1) {
            return Err(ControllerError::Config("solver tolerance must be positive and iterations at least 1".into()));
        }
        for b in [self.bounds.rate_min.right, self.bounds.rate_min.left, self.bounds.rate_max.right, self.bounds.rate_max.left] {
            if !b.is_finite() {
                return Err(ControllerError::Config("wheel-rate bounds must be finite".into()));
            }
        }
        Ok(())
    }
}

/// Latest value of each sensor channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorSnapshot {
    pub pose: Pose<f64>,
    pub pose_stamp_ns: u64,
    pub rates: WheelRates<f64>,
    pub rates_stamp_ns: u64,
}

#[derive(Debug, Default, Clone, Copy)]
struct Slots {
    pose: Option<(Pose<f64>, u64)>,
    rates: Option<(WheelRates<f64>, u64)>,
}

/// Overwrite mailbox between sensor ingestion and the control loop: each
/// channel keeps only its newest sample, and readers always get a consistent
/// pair.
#[derive(Debug, Default)]
pub struct SensorMailbox {
    slots: Mutex<Slots>,
}

impl SensorMailbox {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores a pose unless it is older than the current one.
    pub fn publish_pose(&self, pose: Pose<f64>, stamp_ns: u64) -> bool {
        let mut s = self.slots.lock().unwrap_or_else(|e| e.into_inner());
        if matches!(s.pose, Some((_, t)) if t > stamp_ns) {
            return false;
        }
        s.pose = Some((pose, stamp_ns));
        true
    }

    pub fn publish_rates(&self, rates: WheelRates<f64>, stamp_ns: u64) -> bool {
        let mut s = self.slots.lock().unwrap_or_else(|e| e.into_inner());
        if matches!(s.rates, Some((_, t)) if t > stamp_ns) {
            return false;
        }
        s.rates = Some((rates, stamp_ns));
        true
    }

    /// Both channels' latest values, once each has delivered at least once.
    pub fn snapshot(&self) -> Option<SensorSnapshot> {
        let s = *self.slots.lock().unwrap_or_else(|e| e.into_inner());
        match (s.pose, s.rates) {
            (Some((pose, pt)), Some((rates, rt))) => Some(SensorSnapshot { pose, pose_stamp_ns: pt, rates, rates_stamp_ns: rt }),
            _ => None,
        }
    }

    pub fn has_pose(&self) -> bool {
        self.slots.lock().unwrap_or_else(|e| e.into_inner()).pose.is_some()
    }

    pub fn has_rates(&self) -> bool {
        self.slots.lock().unwrap_or_else(|e| e.into_inner()).rates.is_some()
    }
}

/// One loop iteration as written to the records CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iter: u64,
    /// Controller clock at loop start.
    pub t_wall_ns: u64,
    pub solve_ns: u64,
    pub total_ns: u64,
    pub status: SolveStatus,
    pub qp_solves: usize,
    pub command: WheelRates<f64>,
    pub pose_stamp_ns: u64,
    pub rates_stamp_ns: u64,
    /// Age of the pose used, on the controller clock. `control_step`
    /// assumes sensor stamps share that clock; `run_loop` instead measures
    /// from when the loop first saw the stamp.
    pub pose_age_ns: u64,
    pub rates_age_ns: u64,
}

impl IterationRecord {
    pub fn pose_age_ms(&self) -> f64 {
        self.pose_age_ns as f64 * 1e-6
    }

    pub fn rate_age_ms(&self) -> f64 {
        self.rates_age_ns as f64 * 1e-6
    }

    pub fn failed(&self) -> bool {
        self.status == SolveStatus::NumericFailure
    }
}

/// Flat CSV row: iter, t_wall_ns, solve_ns, total_ns, status, cmd_r, cmd_l,
/// pose_age_ms, rate_age_ms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub iter: u64,
    pub t_wall_ns: u64,
    pub solve_ns: u64,
    pub total_ns: u64,
    pub status: String,
    pub cmd_r: f64,
    pub cmd_l: f64,
    pub pose_age_ms: f64,
    pub rate_age_ms: f64,
}

impl From<&IterationRecord> for RecordRow {
    fn from(r: &IterationRecord) -> Self {
        Self {
            iter: r.iter,
            t_wall_ns: r.t_wall_ns,
            solve_ns: r.solve_ns,
            total_ns: r.total_ns,
            status: r.status.as_str().to_string(),
            cmd_r: r.command.right,
            cmd_l: r.command.left,
            pose_age_ms: r.pose_age_ms(),
            rate_age_ms: r.rate_age_ms(),
        }
    }
}

pub fn write_records<'a, I: IntoIterator<Item = &'a IterationRecord>>(path: &Path, records: I) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(RecordRow::from(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RecordRow>, csv::Error> {
    csv::Reader::from_path(path)?.deserialize().collect()
}

/// Result of one control step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    pub command: WheelRates<f64>,
    pub record: IterationRecord,
}

/// Controller state owned by the control loop.
#[derive(Debug)]
pub struct Controller {
    config: ControllerConfig,
    problem: OcpProblem<f64>,
    state: SolverState<f64>,
    qp: GoldfarbIdnani<f64>,
    refs: Vec<ReferenceSample<f64>>,
    start_ns: u64,
    last_ns: u64,
    prev_command: WheelRates<f64>,
    failures: usize,
    iter: u64,
}

impl Controller {
    /// Builds the NLP at mission time zero and solves it to tolerance; the
    /// result is the first warm start.
    pub fn initialize(config: ControllerConfig, snapshot: &SensorSnapshot, now_ns: u64) -> Result<Self, ControllerError> {
        config.validate()?;
        let n = config.horizon.steps;
        let mut refs = Vec::with_capacity(n + 1);
        config.trajectory.horizon_into(0.0, n, config.horizon.dt, &mut refs)?;
        let pose = unwrap_pose(snapshot.pose, refs[0].pose.alpha);
        let rates = config.bounds.clamp_rates(snapshot.rates);
        let problem = build_nlp(config.horizon, config.weights, config.bounds, config.platform, &refs, pose, rates)?;
        let guess: Vec<_> = refs[..n].iter().map(|r| config.bounds.clamp_rates(reference_wheel_rates(&config.platform, r))).collect();
        let z = problem.rollout(&guess)?.into_vec();
        let mut state = SolverState::new(&problem, z, &config.refine);
        let mut qp = GoldfarbIdnani::with_warm_start();
        let report = solve(&problem, &mut state, &config.refine, &mut qp)?;
        if report.status == SolveStatus::NumericFailure {
            return Err(ControllerError::Startup("initial refine solve failed numerically".into()));
        }
        Ok(Self { config, problem, state, qp, refs, start_ns: now_ns, last_ns: now_ns, prev_command: rates, failures: 0, iter: 0 })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn solver_state(&self) -> &SolverState<f64> {
        &self.state
    }

    pub fn problem(&self) -> &OcpProblem<f64> {
        &self.problem
    }

    /// Objective of the current plan.
    pub fn objective(&self) -> f64 {
        self.problem.objective(&self.state.primal)
    }

    pub fn mission_time(&self, now_ns: u64) -> f64 {
        now_ns.saturating_sub(self.start_ns) as f64 * 1e-9
    }

    /// Planned control at interval `k` of the current solution.
    pub fn planned_control(&self, k: usize) -> WheelRates<f64> {
        WheelRates::new(self.state.primal[5 * k + 3], self.state.primal[5 * k + 4])
    }

    pub fn planned_state(&self, k: usize) -> Pose<f64> {
        Pose::new(self.state.primal[5 * k], self.state.primal[5 * k + 1], self.state.primal[5 * k + 2])
    }

    /// One online iteration at controller time `now_ns`.
    pub fn control_step(&mut self, snapshot: &SensorSnapshot, now_ns: u64) -> Result<StepOutput, ControllerError> {
        let started = Instant::now();
        let cfg = &self.config;
        let n = cfg.horizon.steps;
        let dt = cfg.horizon.dt;
        let t0 = self.mission_time(now_ns);
        cfg.trajectory.horizon_into(t0, n, dt, &mut self.refs)?;
        let pose = unwrap_pose(snapshot.pose, self.refs[0].pose.alpha);
        let rates = cfg.bounds.clamp_rates(snapshot.rates);

        // warm start: move the plan forward by the elapsed time
        let shift = now_ns.saturating_sub(self.last_ns) as f64 * 1e-9 / dt;
        self.last_ns = now_ns;
        if shift > 0.0 {
            warm_start_shift(&mut self.state, shift, None);
            let tail = self.problem.model.step_with_jacobian(cfg.horizon.integrator, &self.planned_state(n - 1), self.planned_control(n - 1), dt).next;
            self.state.primal[5 * n..5 * n + 3].copy_from_slice(&tail);
        }
        let z = &mut self.state.primal;
        z[..3].copy_from_slice(&pose.to_vector());
        z[3] = rates.right;
        z[4] = rates.left;
        self.problem.update(&self.refs, pose, rates)?;

        let solve_start = Instant::now();
        let report = solve(&self.problem, &mut self.state, &cfg.solver, &mut self.qp)?;
        let solve_ns = solve_start.elapsed().as_nanos() as u64;

        if report.status == SolveStatus::NumericFailure {
            self.failures += 1;
            if self.failures >= cfg.max_consecutive_failures {
                return Err(ControllerError::Halt(self.failures));
            }
        } else {
            self.failures = 0;
        }
        // θ̇*₁ of the (possibly only shifted) plan, then the output limiter
        let k = if n >= 2 { 1 } else { 0 };
        let planned = self.planned_control(k);
        let command = limit_command(&cfg.bounds, planned, self.prev_command, cfg.loop_period);
        self.prev_command = command;
        self.iter += 1;
        let record = IterationRecord {
            iter: self.iter - 1,
            t_wall_ns: now_ns,
            solve_ns,
            total_ns: started.elapsed().as_nanos() as u64,
            status: report.status,
            qp_solves: report.qp_solves,
            command,
            pose_stamp_ns: snapshot.pose_stamp_ns,
            rates_stamp_ns: snapshot.rates_stamp_ns,
            pose_age_ns: now_ns.saturating_sub(snapshot.pose_stamp_ns),
            rates_age_ns: now_ns.saturating_sub(snapshot.rates_stamp_ns),
        };
        Ok(StepOutput { command, record })
    }
}

fn unwrap_pose(pose: Pose<f64>, anchor: f64) -> Pose<f64> {
    Pose::new(pose.x(), pose.y(), unwrap_near(pose.alpha, anchor))
}

/// Clamps a command into the rate box and limits its change from `prev` to
/// `accel_max · period` per wheel. Bounds win over the slew limit.
pub fn limit_command(bounds: &Bounds<f64>, wanted: WheelRates<f64>, prev: WheelRates<f64>, period: f64) -> WheelRates<f64> {
    let wanted = if wanted.is_finite() { wanted } else { prev };
    let one = |w: f64, p: f64, amin: f64, amax: f64, lo: f64, hi: f64| {
        let slewed = w.max(p + amin * period).min(p + amax * period);
        let v = if slewed.is_finite() { slewed } else { w };
        v.max(lo).min(hi)
    };
    WheelRates::new(
        one(wanted.right, prev.right, bounds.accel_min.right, bounds.accel_max.right, bounds.rate_min.right, bounds.rate_max.right),
        one(wanted.left, prev.left, bounds.accel_min.left, bounds.accel_max.left, bounds.rate_min.left, bounds.rate_max.left),
    )
}

/// Destination of wheel commands.
pub trait CommandSink {
    fn send(&mut self, command: WheelRates<f64>, stamp_ns: u64) -> io::Result<()>;
}

/// Monotonic controller clock, optionally running faster than wall time.
#[derive(Debug, Clone, Copy)]
pub struct ScaledClock {
    origin: Instant,
    scale: f64,
}

impl ScaledClock {
    pub fn new(scale: f64) -> Self {
        Self { origin: Instant::now(), scale }
    }

    pub fn now_ns(&self) -> u64 {
        (self.origin.elapsed().as_nanos() as f64 * self.scale) as u64
    }

    /// Wall duration corresponding to `ns` of controller time.
    pub fn wall(&self, ns: u64) -> Duration {
        Duration::from_nanos((ns as f64 / self.scale) as u64)
    }
}

/// Summary of a finished loop.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoopStats {
    pub iterations: u64,
    pub send_failures: u64,
    pub failed_steps: u64,
}

/// Waits for both sensor channels, then runs `control_step` every loop period
/// until `stop` is raised or `max_iterations` is reached. The loop never
/// waits on sensors after startup; each iteration's record goes to `records`.
/// With `log`, each newly seen pose also produces a tracking log row.
pub fn run_loop<S: CommandSink>(
    config: ControllerConfig,
    mailbox: &SensorMailbox,
    sink: &mut S,
    records: &TelemetryQueue<IterationRecord>,
    log: Option<&TelemetryQueue<LogRow>>,
    stop: &AtomicBool,
    max_iterations: Option<u64>,
) -> Result<LoopStats, ControllerError> {
    config.validate()?;
    let clock = ScaledClock::new(config.sim_time_scale);
    let deadline = Instant::now() + Duration::from_secs_f64(config.startup_timeout);
    let first = loop {
        if let Some(s) = mailbox.snapshot() {
            break s;
        }
        if stop.load(Ordering::Relaxed) {
            return Ok(LoopStats::default());
        }
        if Instant::now() >= deadline {
            let missing = match (mailbox.has_pose(), mailbox.has_rates()) {
                (false, false) => "pose and wheel-rate channels",
                (false, true) => "pose channel",
                _ => "wheel-rate channel",
            };
            return Err(ControllerError::Startup(format!("no data on the {missing} within {} s", config.startup_timeout)));
        }
        std::thread::sleep(Duration::from_millis(1));
    };
    let period_ns = (config.loop_period * 1e9).round() as u64;
    let mut ctl = Controller::initialize(config, &first, clock.now_ns())?;
    let mut stats = LoopStats::default();
    let mut next = clock.now_ns();
    let mut backoff = 0u64;
    let mut skip_sends = 0u64;
    let mut logged_stamp = None;
    // (stamp, controller time it was first seen) per channel
    let mut pose_seen = (first.pose_stamp_ns, clock.now_ns());
    let mut rates_seen = (first.rates_stamp_ns, clock.now_ns());
    while !stop.load(Ordering::Relaxed) && max_iterations.map_or(true, |m| stats.iterations < m) {
        let now = clock.now_ns();
        let snap = mailbox.snapshot().unwrap_or(first);
        let mut out = ctl.control_step(&snap, now)?;
        if snap.pose_stamp_ns != pose_seen.0 {
            pose_seen = (snap.pose_stamp_ns, now);
        }
        if snap.rates_stamp_ns != rates_seen.0 {
            rates_seen = (snap.rates_stamp_ns, now);
        }
        out.record.pose_age_ns = now.saturating_sub(pose_seen.1);
        out.record.rates_age_ns = now.saturating_sub(rates_seen.1);
        if out.record.failed() {
            stats.failed_steps += 1;
        }
        if skip_sends > 0 {
            skip_sends -= 1;
            stats.send_failures += 1;
        } else if sink.send(out.command, now).is_err() {
            stats.send_failures += 1;
            backoff = (backoff * 2).clamp(1, 512);
            skip_sends = backoff;
        } else {
            backoff = 0;
        }
        records.push(out.record);
        if let Some(log) = log {
            // the plant clock is not shared, so a pose is logged against the
            // mission time at which the loop first sees it
            if logged_stamp != Some(snap.pose_stamp_ns) {
                logged_stamp = Some(snap.pose_stamp_ns);
                let t_ns = (ctl.mission_time(now) * 1e9).round() as u64;
                log.push(crate::sim::log_row(ctl.config(), t_ns, &snap, out.command)?);
            }
        }
        stats.iterations += 1;
        next += period_ns;
        let now = clock.now_ns();
        if next > now {
            std::thread::sleep(clock.wall(next - now));
        } else if now - next > 10 * period_ns {
            // overrun: resynchronise rather than bursting
            next = now;
        }
    }
    Ok(stats)
}

/// Spawns `run_loop` on a thread with a shared stop flag.
pub fn spawn_loop<S: CommandSink + Send + 'static>(
    config: ControllerConfig,
    mailbox: Arc<SensorMailbox>,
    mut sink: S,
    records: Arc<TelemetryQueue<IterationRecord>>,
    log: Option<Arc<TelemetryQueue<LogRow>>>,
    stop: Arc<AtomicBool>,
    max_iterations: Option<u64>,
) -> std::thread::JoinHandle<Result<LoopStats, ControllerError>> {
    std::thread::spawn(move || run_loop(config, &mailbox, &mut sink, &records, log.as_deref(), &stop, max_iterations))
}
