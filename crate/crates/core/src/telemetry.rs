//! Run logs, tracking-error and timing statistics, and report emission.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use crossbeam::queue::ArrayQueue;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::RecordRow;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("log is empty")]
    EmptyLog,
    #[error("need at least {needed} samples, got {found}")]
    TooShort { needed: usize, found: usize },
    #[error("no timing records")]
    NoRecords,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {message}")]
    Thresholds { path: PathBuf, message: String },
}

/// Bounded append channel between the control loop and a telemetry sink.
/// When full, the oldest entry is discarded and counted.
#[derive(Debug)]
pub struct TelemetryQueue<T> {
    queue: ArrayQueue<T>,
    dropped: AtomicU64,
}

impl<T> TelemetryQueue<T> {
    pub fn new(capacity: usize) -> Self {
        Self { queue: ArrayQueue::new(capacity.max(1)), dropped: AtomicU64::new(0) }
    }

    pub fn push(&self, item: T) {
        if self.queue.force_push(item).is_some() {
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn pop(&self) -> Option<T> {
        self.queue.pop()
    }

    pub fn drain_into(&self, out: &mut Vec<T>) -> usize {
        let before = out.len();
        while let Some(v) = self.queue.pop() {
            out.push(v);
        }
        out.len() - before
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }
}

/// One aligned sample of a closed-loop run. Velocities are planar world
/// frame; `meas_v*` comes from the wheel-rate sensor and measured heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t_ns: u64,
    pub ref_x: f64,
    pub ref_y: f64,
    pub ref_alpha: f64,
    pub ref_vx: f64,
    pub ref_vy: f64,
    pub meas_x: f64,
    pub meas_y: f64,
    pub meas_alpha: f64,
    pub meas_vx: f64,
    pub meas_vy: f64,
    pub cmd_r: f64,
    pub cmd_l: f64,
    pub rate_r: f64,
    pub rate_l: f64,
}

impl LogRow {
    fn has_reference(&self) -> bool {
        [self.ref_x, self.ref_y, self.ref_vx, self.ref_vy].iter().all(|v| v.is_finite())
    }

    fn is_clean(&self) -> bool {
        [self.meas_x, self.meas_y, self.meas_alpha, self.meas_vx, self.meas_vy, self.cmd_r, self.cmd_l, self.rate_r, self.rate_l]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub rows: Vec<LogRow>,
}

impl RunLog {
    pub fn new(rows: Vec<LogRow>) -> Self {
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Drops samples without a reference and flags (removes and counts)
    /// samples with non-finite measurements. Returns the number flagged.
    pub fn clean(&mut self) -> usize {
        self.rows.retain(|r| r.has_reference());
        let before = self.rows.len();
        self.rows.retain(LogRow::is_clean);
        before - self.rows.len()
    }

    /// Samples with `t_ns >= from_ns`.
    pub fn after(&self, from_ns: u64) -> RunLog {
        RunLog { rows: self.rows.iter().filter(|r| r.t_ns >= from_ns).copied().collect() }
    }

    pub fn between(&self, from_ns: u64, to_ns: u64) -> RunLog {
        RunLog { rows: self.rows.iter().filter(|r| r.t_ns >= from_ns && r.t_ns < to_ns).copied().collect() }
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), MetricsError> {
        let csv_err = |source| MetricsError::Csv { path: path.to_path_buf(), source };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for r in &self.rows {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush().map_err(|source| MetricsError::Io { path: path.to_path_buf(), source })
    }

    pub fn read_csv(path: &Path) -> Result<Self, MetricsError> {
        let csv_err = |source| MetricsError::Csv { path: path.to_path_buf(), source };
        let rows = csv::Reader::from_path(path).map_err(csv_err)?.deserialize().collect::<Result<_, _>>().map_err(csv_err)?;
        Ok(Self { rows })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorStats {
    pub avg: f64,
    pub rms: f64,
    pub series: Vec<f64>,
}

impl ErrorStats {
    pub fn from_series(series: Vec<f64>) -> Result<Self, MetricsError> {
        if series.is_empty() {
            return Err(MetricsError::EmptyLog);
        }
        let n = series.len() as f64;
        let avg = series.iter().sum::<f64>() / n;
        let rms = (series.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
        Ok(Self { avg, rms, series })
    }

    pub fn max(&self) -> f64 {
        self.series.iter().copied().fold(0.0, f64::max)
    }
}

pub fn position_errors(log: &RunLog) -> Result<ErrorStats, MetricsError> {
    let series = log.rows.iter().filter(|r| r.has_reference()).map(|r| (r.meas_x - r.ref_x).hypot(r.meas_y - r.ref_y)).collect();
    ErrorStats::from_series(series)
}

/// Where the measured velocity comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VelocitySource {
    /// The logged `meas_vx, meas_vy` columns.
    Logged,
    /// Central differences of measured position over a window in seconds.
    Differenced { window: f64 },
}

impl Default for VelocitySource {
    fn default() -> Self {
        Self::Logged
    }
}

/// Central-difference velocity of the measured position: for each sample,
/// the slope between the samples closest to `t ± window/2` (clipped at the
/// ends). Samples with no distinct neighbours get `None`.
pub fn differenced_velocity(log: &RunLog, window: f64) -> Vec<Option<[f64; 2]>> {
    let rows = &log.rows;
    let half = (window * 0.5 * 1e9).max(0.0) as u64;
    let mut out = Vec::with_capacity(rows.len());
    let (mut lo, mut hi) = (0usize, 0usize);
    for (i, r) in rows.iter().enumerate() {
        let t_lo = r.t_ns.saturating_sub(half);
        let t_hi = r.t_ns.saturating_add(half);
        while lo < i && rows[lo].t_ns < t_lo {
            lo += 1;
        }
        hi = hi.max(i);
        while hi + 1 < rows.len() && rows[hi + 1].t_ns <= t_hi {
            hi += 1;
        }
        let (a, b) = (&rows[lo], &rows[hi]);
        if b.t_ns <= a.t_ns {
            out.push(None);
            continue;
        }
        let dt = (b.t_ns - a.t_ns) as f64 * 1e-9;
        out.push(Some([(b.meas_x - a.meas_x) / dt, (b.meas_y - a.meas_y) / dt]));
    }
    out
}

pub fn velocity_errors(log: &RunLog, source: VelocitySource) -> Result<ErrorStats, MetricsError> {
    let rows: Vec<&LogRow> = log.rows.iter().filter(|r| r.has_reference()).collect();
    if rows.len() < 2 {
        return Err(MetricsError::TooShort { needed: 2, found: rows.len() });
    }
    let series = match source {
        VelocitySource::Logged => rows.iter().map(|r| (r.meas_vx - r.ref_vx).hypot(r.meas_vy - r.ref_vy)).collect(),
        VelocitySource::Differenced { window } => {
            let aligned = RunLog { rows: rows.iter().map(|r| **r).collect() };
            differenced_velocity(&aligned, window)
                .into_iter()
                .zip(&aligned.rows)
                .filter_map(|(v, r)| v.map(|v| (v[0] - r.ref_vx).hypot(v[1] - r.ref_vy)))
                .collect()
        }
    };
    ErrorStats::from_series(series)
}

/// Nearest-rank percentile of an ascending sample: the smallest value with
/// at least `p`% of samples at or below it.
pub fn nearest_rank(sorted: &[u64], p: f64) -> u64 {
    assert!(!sorted.is_empty(), "nearest_rank of an empty sample");
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Empirical distribution of durations in nanoseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingDistribution {
    sorted: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingSummary {
    pub count: usize,
    pub p50: u64,
    pub p98: u64,
    pub p999: u64,
    pub max: u64,
}

impl TimingSummary {
    pub fn tail_ratio(&self) -> f64 {
        self.p999 as f64 / (self.p50.max(1)) as f64
    }
}

impl TimingDistribution {
    pub fn new(mut samples: Vec<u64>) -> Result<Self, MetricsError> {
        if samples.is_empty() {
            return Err(MetricsError::NoRecords);
        }
        samples.sort_unstable();
        Ok(Self { sorted: samples })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn percentile(&self, p: f64) -> u64 {
        nearest_rank(&self.sorted, p)
    }

    /// Fraction of samples `≤ t`.
    pub fn fraction_at_most(&self, t: u64) -> f64 {
        self.sorted.partition_point(|&v| v <= t) as f64 / self.sorted.len() as f64
    }

    /// The curve evaluated on `grid`.
    pub fn curve(&self, grid: &[u64]) -> Vec<(u64, f64)> {
        grid.iter().map(|&t| (t, self.fraction_at_most(t))).collect()
    }

    /// `points` evenly spaced grid values from 0 to the maximum sample.
    pub fn default_grid(&self, points: usize) -> Vec<u64> {
        let max = *self.sorted.last().unwrap_or(&0);
        let points = points.max(2);
        (0..points).map(|i| ((max as u128 * i as u128) / (points as u128 - 1)) as u64).collect()
    }

    pub fn summary(&self) -> TimingSummary {
        TimingSummary {
            count: self.sorted.len(),
            p50: self.percentile(50.0),
            p98: self.percentile(98.0),
            p999: self.percentile(99.9),
            max: *self.sorted.last().unwrap_or(&0),
        }
    }
}

/// Curve of `total_ns` over the records.
pub fn timing_percentiles(records: &[RecordRow], grid_points: usize) -> Result<(Vec<(u64, f64)>, TimingSummary), MetricsError> {
    let dist = TimingDistribution::new(records.iter().map(|r| r.total_ns).collect())?;
    Ok((dist.curve(&dist.default_grid(grid_points)), dist.summary()))
}

/// Acceptance thresholds; absent entries are not checked.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub position_avg: Option<f64>,
    pub position_rms: Option<f64>,
    pub velocity_avg: Option<f64>,
    pub velocity_rms: Option<f64>,
    /// Milliseconds.
    pub solve_p98_ms: Option<f64>,
    pub total_p98_ms: Option<f64>,
    pub tail_ratio: Option<f64>,
}

impl Thresholds {
    pub fn from_file(path: &Path) -> Result<Self, MetricsError> {
        let text = fs::read_to_string(path).map_err(|source| MetricsError::Io { path: path.to_path_buf(), source })?;
        toml::from_str(&text).map_err(|e| MetricsError::Thresholds { path: path.to_path_buf(), message: e.to_string() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutcome {
    pub position: ErrorStats,
    pub velocity: ErrorStats,
    pub solve: TimingSummary,
    pub total: TimingSummary,
    pub violations: Vec<String>,
    pub summary: String,
}

impl ReportOutcome {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Computes all statistics and writes `errors.csv`, `timing.csv` and
/// `summary.txt` into `out_dir`.
pub fn report(log: &RunLog, records: &[RecordRow], thresholds: &Thresholds, out_dir: &Path) -> Result<ReportOutcome, MetricsError> {
    let mut log = log.clone();
    let flagged = log.clean();
    let position = position_errors(&log)?;
    let velocity = velocity_errors(&log, VelocitySource::Logged)?;
    assert!(position.rms >= position.avg * (1.0 - 1e-12) && velocity.rms >= velocity.avg * (1.0 - 1e-12));
    let solve_dist = TimingDistribution::new(records.iter().map(|r| r.solve_ns).collect())?;
    let total_dist = TimingDistribution::new(records.iter().map(|r| r.total_ns).collect())?;
    let (solve, total) = (solve_dist.summary(), total_dist.summary());

    let mut violations = Vec::new();
    let mut check = |name: &str, value: f64, limit: Option<f64>| {
        if let Some(limit) = limit {
            if value > limit || value.is_nan() {
                violations.push(format!("{name} = {value:.6} exceeds {limit}"));
            }
        }
    };
    check("position_avg", position.avg, thresholds.position_avg);
    check("position_rms", position.rms, thresholds.position_rms);
    check("velocity_avg", velocity.avg, thresholds.velocity_avg);
    check("velocity_rms", velocity.rms, thresholds.velocity_rms);
    check("solve_p98_ms", solve.p98 as f64 * 1e-6, thresholds.solve_p98_ms);
    check("total_p98_ms", total.p98 as f64 * 1e-6, thresholds.total_p98_ms);
    check("tail_ratio", solve.tail_ratio(), thresholds.tail_ratio);

    fs::create_dir_all(out_dir).map_err(|source| MetricsError::Io { path: out_dir.to_path_buf(), source })?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| MetricsError::Io { path, source }
    };

    let errors_path = out_dir.join("errors.csv");
    let mut text = String::from("t_ns,position_error,velocity_error\n");
    for ((r, p), v) in log.rows.iter().zip(&position.series).zip(&velocity.series) {
        let _ = writeln!(text, "{},{p},{v}", r.t_ns);
    }
    fs::write(&errors_path, text).map_err(io(&errors_path))?;

    let timing_path = out_dir.join("timing.csv");
    let mut text = String::from("t_ns,fraction_total,fraction_solve\n");
    for t in total_dist.default_grid(201) {
        let _ = writeln!(text, "{t},{},{}", total_dist.fraction_at_most(t), solve_dist.fraction_at_most(t));
    }
    fs::write(&timing_path, text).map_err(io(&timing_path))?;

    let ms = |ns: u64| ns as f64 * 1e-6;
    let mut summary = String::new();
    let _ = writeln!(summary, "samples: {} ({} flagged and dropped)", log.len(), flagged);
    let _ = writeln!(summary, "position e_avg [m]: {:.6}", position.avg);
    let _ = writeln!(summary, "position e_rms [m]: {:.6}", position.rms);
    let _ = writeln!(summary, "velocity e_avg [m/s]: {:.6}", velocity.avg);
    let _ = writeln!(summary, "velocity e_rms [m/s]: {:.6}", velocity.rms);
    let _ = writeln!(summary, "velocity source: measured (wheel-rate sensor and measured heading)");
    for (name, s) in [("solve", &solve), ("total", &total)] {
        let _ = writeln!(
            summary,
            "{name} [ms]: n={} p50={:.4} p98={:.4} p99.9={:.4} max={:.4} p99.9/p50={:.3}",
            s.count,
            ms(s.p50),
            ms(s.p98),
            ms(s.p999),
            ms(s.max),
            s.tail_ratio()
        );
    }
    if violations.is_empty() {
        summary.push_str("thresholds: all satisfied\n");
    } else {
        for v in &violations {
            let _ = writeln!(summary, "VIOLATED {v}");
        }
    }
    let summary_path = out_dir.join("summary.txt");
    fs::write(&summary_path, &summary).map_err(io(&summary_path))?;
    Ok(ReportOutcome { position, velocity, solve, total, violations, summary })
}
