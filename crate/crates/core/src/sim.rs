//! Closed-loop runs: an in-process lock-step mode for deterministic tests and
//! the UDP plant / sensor-ingestion processes of a distributed deployment.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use thiserror::Error;

use crate::controller::{CommandSink, Controller, ControllerConfig, ControllerError, IterationRecord, NetworkConfig, ScaledClock, SensorSnapshot, SensorMailbox};
use crate::plant::{measured_velocity, plant_step, PlantConfig, PlantError, PlantState, SensorEmitter, TruthRow};
use crate::se2::Pose;
use crate::skidsteer::WheelRates;
use crate::telemetry::{LogRow, RunLog};
use crate::udp::{Endpoint, LinkError, MessageKind, Payload, Role};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error("duration must be positive, got {0}")]
    Duration(f64),
}

/// Log row for a pose measurement taken at mission time `t_ns`.
pub fn log_row(config: &ControllerConfig, t_ns: u64, snapshot: &SensorSnapshot, command: WheelRates<f64>) -> Result<LogRow, ControllerError> {
    let r = config.trajectory.sample(t_ns as f64 * 1e-9)?;
    let v = measured_velocity(&config.platform, snapshot.rates, snapshot.pose.alpha);
    Ok(LogRow {
        t_ns,
        ref_x: r.pose.x(),
        ref_y: r.pose.y(),
        ref_alpha: r.pose.alpha,
        ref_vx: r.rate[0],
        ref_vy: r.rate[1],
        meas_x: snapshot.pose.x(),
        meas_y: snapshot.pose.y(),
        meas_alpha: snapshot.pose.alpha,
        meas_vx: v[0],
        meas_vy: v[1],
        cmd_r: command.right,
        cmd_l: command.left,
        rate_r: snapshot.rates.right,
        rate_l: snapshot.rates.left,
    })
}

#[derive(Debug, Clone, Default)]
pub struct ClosedLoopRun {
    /// One row per pose measurement.
    pub log: RunLog,
    /// Plant truth at every pose measurement.
    pub truth: Vec<TruthRow>,
    pub iterations: u64,
    pub failed_steps: u64,
}

/// Runs controller and plant in lock step on one clock for `duration`
/// seconds: each loop period the plant emits due measurements, the
/// controller computes a command, and the plant advances under it. The plant
/// starts at rest on `start` (default: the reference at time zero). Every
/// iteration record is passed to `on_record`.
pub fn run_closed_loop<F: FnMut(&IterationRecord)>(
    controller: &ControllerConfig,
    plant: &PlantConfig,
    duration: f64,
    start: Option<Pose<f64>>,
    mut on_record: F,
) -> Result<ClosedLoopRun, SimError> {
    if !(duration.is_finite() && duration > 0.0) {
        return Err(SimError::Duration(duration));
    }
    controller.validate()?;
    plant.validate()?;
    let start = match start {
        Some(p) => p,
        None => controller.trajectory.sample(0.0).map_err(ControllerError::from)?.pose,
    };
    let period = controller.loop_period;
    let period_ns = (period * 1e9).round() as u64;
    let steps = (duration / period).round() as u64;
    let mut state = PlantState::at_rest(start);
    let mut emitter = SensorEmitter::new(plant);
    let mut run = ClosedLoopRun::default();

    let (p, r) = emitter.emit(&state);
    let (p, r) = (p.expect("pose due at time zero"), r.expect("rates due at time zero"));
    let mut snap = SensorSnapshot { pose: p.value, pose_stamp_ns: p.stamp_ns, rates: r.value, rates_stamp_ns: r.stamp_ns };
    let mut ctl = Controller::initialize(controller.clone(), &snap, 0)?;
    let mut new_pose = true;
    for i in 0..steps {
        let now = i * period_ns;
        if i > 0 {
            let (p, r) = emitter.emit(&state);
            if let Some(p) = p {
                snap.pose = p.value;
                snap.pose_stamp_ns = p.stamp_ns;
                new_pose = true;
            }
            if let Some(r) = r {
                snap.rates = r.value;
                snap.rates_stamp_ns = r.stamp_ns;
            }
        }
        let out = ctl.control_step(&snap, now)?;
        on_record(&out.record);
        run.failed_steps += out.record.failed() as u64;
        if new_pose {
            run.log.rows.push(log_row(controller, snap.pose_stamp_ns, &snap, out.command)?);
            run.truth.push(TruthRow::from(&state));
            new_pose = false;
        }
        state = plant_step(plant, &state, out.command, period);
        debug_assert_eq!(state.clock_ns, now + period_ns);
        run.iterations += 1;
    }
    Ok(run)
}

impl CommandSink for Endpoint {
    fn send(&mut self, command: WheelRates<f64>, stamp_ns: u64) -> std::io::Result<()> {
        self.send_command(command, stamp_ns).map_err(|e| match e {
            LinkError::Send(io) => io,
            other => std::io::Error::new(std::io::ErrorKind::Other, other.to_string()),
        })
    }
}

/// Feeds the mailbox from the pose and wheel-rate sinks until `stop`.
pub fn spawn_ingest(network: &NetworkConfig, mailbox: Arc<SensorMailbox>, stop: Arc<AtomicBool>) -> Result<JoinHandle<Result<(), LinkError>>, LinkError> {
    let mut pose = Endpoint::open(Role::Sink, &network.pose_addr)?;
    let mut rates = Endpoint::open(Role::Sink, &network.rates_addr)?;
    Ok(thread::spawn(move || {
        while !stop.load(Ordering::Relaxed) {
            let mut idle = true;
            if let Some(m) = pose.drain()?.get(MessageKind::Pose) {
                if let Payload::Pose(p) = m.payload {
                    mailbox.publish_pose(p, m.timestamp_ns);
                    idle = false;
                }
            }
            if let Some(m) = rates.drain()?.get(MessageKind::Rates) {
                if let Payload::Rates(r) = m.payload {
                    mailbox.publish_rates(r, m.timestamp_ns);
                    idle = false;
                }
            }
            if idle {
                thread::sleep(Duration::from_micros(100));
            }
        }
        Ok(())
    }))
}

/// Plant process: advances the plant in (scaled) real time, applying the
/// newest received command and streaming measurements over UDP. Returns the
/// truth at every pose emission.
pub fn run_plant_udp(
    plant: &PlantConfig,
    network: &NetworkConfig,
    start: Pose<f64>,
    time_scale: f64,
    duration: f64,
    stop: &AtomicBool,
) -> Result<Vec<TruthRow>, SimError> {
    if !(duration.is_finite() && duration > 0.0) {
        return Err(SimError::Duration(duration));
    }
    plant.validate()?;
    let mut commands = Endpoint::open(Role::Sink, &network.command_addr)?;
    let mut pose_out = Endpoint::open(Role::PoseSource, &network.pose_addr)?;
    let mut rates_out = Endpoint::open(Role::RateSource, &network.rates_addr)?;
    let clock = ScaledClock::new(time_scale);
    let mut emitter = SensorEmitter::new(plant);
    let mut state = PlantState::at_rest(start);
    let mut command = WheelRates::splat(0.0);
    let mut truth = Vec::new();
    let end_ns = (duration * 1e9) as u64;
    while state.clock_ns < end_ns && !stop.load(Ordering::Relaxed) {
        if let Some(m) = commands.drain()?.get(MessageKind::Command) {
            if let Payload::Command(c) = m.payload {
                command = c;
            }
        }
        let (p, r) = emitter.emit(&state);
        // send failures are transient on loopback; the next period retries
        if let Some(p) = p {
            let _ = pose_out.send_pose(p.value, p.stamp_ns);
            truth.push(TruthRow::from(&state));
        }
        if let Some(r) = r {
            let _ = rates_out.send_rates(r.value, r.stamp_ns);
        }
        state = plant_step(plant, &state, command, plant.substep);
        let now = clock.now_ns();
        if state.clock_ns > now {
            thread::sleep(clock.wall(state.clock_ns - now));
        }
    }
    Ok(truth)
}
