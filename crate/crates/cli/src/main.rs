use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use skidsteer_nmpc::config::RunConfig;
use skidsteer_nmpc::controller::{spawn_loop, write_records, IterationRecord, RecordRow, SensorMailbox};
use skidsteer_nmpc::plant::write_truth;
use skidsteer_nmpc::sim::{run_closed_loop, run_plant_udp, spawn_ingest};
use skidsteer_nmpc::telemetry::{report, LogRow, RunLog, TelemetryQueue, Thresholds};
use skidsteer_nmpc::udp::{Endpoint, Role};

#[derive(Parser)]
#[command(name = "skidsteer-nmpc", version, about = "Real-time NMPC for skid-steered platforms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the configured reference trajectory as CSV.
    GenTraj {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seconds to sample [default: period × laps].
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long, default_value_t = 0.1)]
        dt: f64,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the control loop against UDP sensor streams.
    RunController {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        sim_time_scale: Option<f64>,
        /// Stop after this many seconds of controller time.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        records_out: Option<PathBuf>,
        /// Tracking log, one row per received pose.
        #[arg(long)]
        log_out: Option<PathBuf>,
    },
    /// Run the simulated plant, over UDP or in lock step with the controller.
    RunSim {
        #[arg(long)]
        config: PathBuf,
        /// Run controller and plant in one process on a shared clock.
        #[arg(long)]
        in_process: bool,
        /// Seconds to simulate [default: period × laps].
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        sim_time_scale: Option<f64>,
        #[arg(long)]
        truth_out: Option<PathBuf>,
        /// In-process only: tracking log.
        #[arg(long)]
        log_out: Option<PathBuf>,
        /// In-process only: per-iteration records.
        #[arg(long)]
        records_out: Option<PathBuf>,
    },
    /// Compute tracking errors and timing percentiles from a finished run.
    Report {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        thresholds: Option<PathBuf>,
    },
}

fn load(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn gen_traj(config: Option<&Path>, duration: Option<f64>, dt: f64, out: Option<&Path>) -> Result<()> {
    let spec = load(config)?.controller.trajectory;
    let duration = duration.unwrap_or_else(|| spec.duration());
    if !(dt.is_finite() && dt > 0.0) {
        bail!("--dt must be positive, got {dt}");
    }
    if !(duration.is_finite() && duration >= 0.0) {
        bail!("--duration must be non-negative, got {duration}");
    }
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["t", "x", "y", "alpha", "xdot", "ydot", "alphadot"])?;
    let steps = (duration / dt + 1e-9).floor() as u64;
    for i in 0..=steps {
        let t = i as f64 * dt;
        let s = spec.sample(t)?;
        w.serialize((t, s.pose.x(), s.pose.y(), s.pose.alpha, s.rate[0], s.rate[1], s.rate[2]))?;
    }
    w.flush()?;
    Ok(())
}

fn run_controller(config: &Path, time_scale: Option<f64>, duration: Option<f64>, records_out: Option<&Path>, log_out: Option<&Path>) -> Result<()> {
    let mut cfg = load(Some(config))?.controller;
    if let Some(s) = time_scale {
        cfg.sim_time_scale = s;
    }
    cfg.validate()?;
    let max_iterations = duration.map(|d| (d / cfg.loop_period).round() as u64);
    let mailbox = Arc::new(SensorMailbox::new());
    let stop = Arc::new(AtomicBool::new(false));
    let ingest = spawn_ingest(&cfg.network, mailbox.clone(), stop.clone())?;
    let sink = Endpoint::open(Role::CommandSource, &cfg.network.command_addr)?;
    let records = Arc::new(TelemetryQueue::<IterationRecord>::new(1 << 16));
    let log = Arc::new(TelemetryQueue::<LogRow>::new(1 << 12));
    let handle = spawn_loop(cfg, mailbox, sink, records.clone(), Some(log.clone()), stop.clone(), max_iterations);

    // stream telemetry to disk while the loop runs so an interrupted run
    // keeps everything up to the last flush
    let mut rec_w = records_out.map(csv::Writer::from_path).transpose()?;
    let mut log_w = log_out.map(csv::Writer::from_path).transpose()?;
    let mut buf = Vec::new();
    let mut rows = Vec::new();
    let mut flush = |done: bool| -> Result<()> {
        buf.clear();
        records.drain_into(&mut buf);
        rows.clear();
        log.drain_into(&mut rows);
        if let Some(w) = rec_w.as_mut() {
            for r in &buf {
                w.serialize(RecordRow::from(r))?;
            }
            w.flush()?;
        }
        if let Some(w) = log_w.as_mut() {
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        if done && (records.dropped() > 0 || log.dropped() > 0) {
            eprintln!("telemetry overflow: {} records and {} log rows dropped", records.dropped(), log.dropped());
        }
        Ok(())
    };
    while !handle.is_finished() {
        thread::sleep(Duration::from_millis(50));
        flush(false)?;
    }
    let result = handle.join().expect("control loop panicked");
    flush(true)?;
    stop.store(true, Ordering::Relaxed);
    ingest.join().expect("ingest thread panicked")?;
    let stats = result?;
    eprintln!("{} iterations, {} failed steps, {} command sends skipped or failed", stats.iterations, stats.failed_steps, stats.send_failures);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_sim(
    config: &Path,
    in_process: bool,
    duration: Option<f64>,
    time_scale: Option<f64>,
    truth_out: Option<&Path>,
    log_out: Option<&Path>,
    records_out: Option<&Path>,
) -> Result<()> {
    let RunConfig { controller, plant } = load(Some(config))?;
    let duration = duration.unwrap_or_else(|| controller.trajectory.duration());
    if in_process {
        let mut records = Vec::new();
        let keep = records_out.is_some();
        let run = run_closed_loop(&controller, &plant, duration, None, |r| {
            if keep {
                records.push(*r);
            }
        })?;
        if let Some(p) = truth_out {
            write_truth(p, &run.truth).with_context(|| format!("writing {}", p.display()))?;
        }
        if let Some(p) = log_out {
            run.log.write_csv(p)?;
        }
        if let Some(p) = records_out {
            write_records(p, &records).with_context(|| format!("writing {}", p.display()))?;
        }
        eprintln!("{} iterations, {} failed steps, {} poses logged", run.iterations, run.failed_steps, run.log.len());
        return Ok(());
    }
    if log_out.is_some() || records_out.is_some() {
        bail!("--log-out and --records-out need --in-process; the controller process writes them otherwise");
    }
    let start = controller.trajectory.sample(0.0)?.pose;
    let scale = time_scale.unwrap_or(controller.sim_time_scale);
    let stop = AtomicBool::new(false);
    let truth = run_plant_udp(&plant, &controller.network, start, scale, duration, &stop)?;
    if let Some(p) = truth_out {
        write_truth(p, &truth).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn run_report(log: &Path, records: &Path, out: &Path, thresholds: Option<&Path>) -> Result<bool> {
    let log = RunLog::read_csv(log)?;
    let records = skidsteer_nmpc::controller::read_records(records).with_context(|| format!("reading {}", records.display()))?;
    let thresholds = match thresholds {
        Some(p) => Thresholds::from_file(p)?,
        None => Thresholds::default(),
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let outcome = report(&log, &records, &thresholds, out)?;
    print!("{}", outcome.summary);
    Ok(outcome.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenTraj { config, duration, dt, out } => gen_traj(config.as_deref(), *duration, *dt, out.as_deref()).map(|_| true),
        Command::RunController { config, sim_time_scale, duration, records_out, log_out } => {
            run_controller(config, *sim_time_scale, *duration, records_out.as_deref(), log_out.as_deref()).map(|_| true)
        }
        Command::RunSim { config, in_process, duration, sim_time_scale, truth_out, log_out, records_out } => {
            run_sim(config, *in_process, *duration, *sim_time_scale, truth_out.as_deref(), log_out.as_deref(), records_out.as_deref()).map(|_| true)
        }
        Command::Report { log, records, out, thresholds } => run_report(log, records, out, thresholds.as_deref()),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
