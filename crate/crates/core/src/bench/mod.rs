//! Benchmark harness: workload generators, runners, and result tables.
//!
//! Results are long-form rows `workload, policy, metric, value, unit, seed`.
//! Sweeps are also written as whitespace-separated `.dat` files that gnuplot
//! reads directly.

pub mod gen;
pub mod suites;

use std::io::{self, Write};
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::api::SchedulerPolicy;
use crate::hints::{HintDirection, HintError};
use crate::kernel::concurrent::ConcurrentSim;
use crate::kernel::{percentile, Metrics, Sim, SimConfig, SimError, Workload};
use crate::policies::{build, PolicyKind, PolicyParams, Wfq, WfqConfig};
use crate::record::log::{LoadedLog, LogHeader, LogMode, LogWriter};
use crate::record::replay::{replay, ReplayError, ReplayOptions, ReplayReport};
use crate::record::{Drainer, LockFactory, LogSummary, Recorder, DEFAULT_RING_CAPACITY};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("hint queue: {0}")]
    Hint(#[from] HintError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{0}")]
    Setup(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub workload: String,
    pub policy: String,
    pub metric: String,
    pub value: f64,
    pub unit: String,
    pub seed: u64,
}

/// Rows produced by one run, sharing workload, policy and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub workload: String,
    pub policy: String,
    pub seed: u64,
    pub rows: Vec<Row>,
}

impl BenchResult {
    pub fn new(workload: impl Into<String>, policy: impl Into<String>, seed: u64) -> Self {
        BenchResult { workload: workload.into(), policy: policy.into(), seed, rows: Vec::new() }
    }

    pub fn push(&mut self, metric: impl Into<String>, value: f64, unit: &str) {
        self.rows.push(Row {
            workload: self.workload.clone(),
            policy: self.policy.clone(),
            metric: metric.into(),
            value,
            unit: unit.into(),
            seed: self.seed,
        });
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric).map(|r| r.value)
    }

    /// Latency percentiles, completion, share and counter rows shared by
    /// every run.
    pub fn add_standard(&mut self, m: &Metrics, warmup_ns: u64) {
        let wakes = m.wake_latencies(None, warmup_ns);
        self.push("wake_p50", percentile(&wakes, 50.0) as f64, "ns");
        self.push("wake_p99", percentile(&wakes, 99.0) as f64, "ns");
        for label in &m.labels {
            let w = m.wake_latencies(Some(label), warmup_ns);
            if !w.is_empty() {
                self.push(format!("wake_p50_{label}"), percentile(&w, 50.0) as f64, "ns");
                self.push(format!("wake_p99_{label}"), percentile(&w, 99.0) as f64, "ns");
            }
            let r = m.response_times(Some(label), warmup_ns);
            if !r.is_empty() {
                self.push(format!("response_p50_{label}"), percentile(&r, 50.0) as f64, "ns");
                self.push(format!("response_p99_{label}"), percentile(&r, 99.0) as f64, "ns");
            }
            self.push(format!("cpu_share_{label}"), m.cpu_share(label), "fraction");
        }
        let done = m.tasks.iter().filter(|t| t.completed_at.is_some()).count();
        self.push("completed", done as f64, "tasks");
        if m.end_ns > 0 {
            self.push("throughput", done as f64 * 1e9 / m.end_ns as f64, "tasks/s");
        }
        self.push("end", m.end_ns as f64, "ns");
        self.push("decisions", m.counters.decisions as f64, "count");
        self.push("rejections", m.counters.rejections as f64, "count");
        self.push("messages", m.messages.values().sum::<u64>() as f64, "count");
        self.push("violations", m.violations().len() as f64, "count");
        for u in &m.upgrades {
            self.push("upgrade_blackout", u.blackout_ns as f64, "ns");
        }
    }
}

pub fn write_csv<W: Write>(results: &[BenchResult], out: W) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    for r in results.iter().flat_map(|r| &r.rows) {
        w.serialize(r).map_err(|e| BenchError::Setup(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// A table for gnuplot: a `#`-prefixed header line, then one row per line.
#[derive(Debug, Clone, PartialEq)]
pub struct DatFile {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl DatFile {
    pub fn write<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "# {}", self.columns.join(" "))?;
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(out, "{}", cells.join(" "))?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> io::Result<()> {
        let f = std::fs::File::create(dir.join(format!("{}.dat", self.name)))?;
        self.write(io::BufWriter::new(f))
    }
}

/// Resolves the policy list: the workload's own, else `fallback` for class 0.
pub fn policies_for(w: &Workload, fallback: &[PolicyKind]) -> Result<Vec<PolicyKind>, BenchError> {
    if w.policies.is_empty() {
        return Ok(fallback.to_vec());
    }
    w.policies.iter().map(|p| p.parse().map_err(BenchError::Setup)).collect()
}

/// Adds classes, opens the workload's hint queue and spawns every task.
pub fn populate(sim: &mut Sim, w: &Workload, kinds: &[PolicyKind], params: PolicyParams) -> Result<(), BenchError> {
    let locks = sim.lock_factory();
    for &k in kinds {
        sim.add_class(build(k, params, &locks))?;
    }
    if let Some(cap) = w.hint_queue {
        sim.create_queue(0, HintDirection::UserToSched, cap)?;
    }
    for t in &w.tasks {
        sim.spawn(t.clone())?;
    }
    Ok(())
}

pub fn sim_config(w: &Workload, seed: u64) -> SimConfig {
    SimConfig::new(w.num_cores).seed(seed)
}

/// Runs `w` in virtual time with one policy per class.
pub fn run_virtual(w: &Workload, kinds: &[PolicyKind], seed: u64) -> Result<Metrics, BenchError> {
    let mut sim = Sim::new(sim_config(w, seed));
    populate(&mut sim, w, kinds, PolicyParams::new(w.num_cores, seed))?;
    sim.run_until(w.duration_ns)?;
    Ok(sim.metrics())
}

/// Virtual-time ns per wall ns used by the harness in concurrent mode.
pub const CONCURRENT_TIME_SCALE: f64 = 0.05;

pub fn concurrent_config(w: &Workload, seed: u64) -> SimConfig {
    let mut cfg = SimConfig::new(w.num_cores).seed(seed);
    cfg.mode = crate::kernel::Mode::Concurrent;
    cfg.time_scale = CONCURRENT_TIME_SCALE;
    cfg
}

pub fn run_concurrent(w: &Workload, kind: PolicyKind, cfg: SimConfig) -> Result<Metrics, BenchError> {
    if w.hint_queue.is_some() {
        return Err(BenchError::Setup("hint queues are not supported in concurrent mode".into()));
    }
    let mut sim = ConcurrentSim::new(cfg.clone());
    sim.set_policy(build(kind, PolicyParams::new(cfg.num_cores, cfg.seed), &sim.lock_factory()));
    for t in &w.tasks {
        sim.spawn(t.clone());
    }
    Ok(sim.run(w.duration_ns)?)
}

/// The second WFQ build used by upgrade demonstrations: same capsule
/// format, new version string.
pub fn wfq_v2(num_cores: u32, locks: &LockFactory) -> Arc<dyn SchedulerPolicy> {
    Arc::new(Wfq::new(WfqConfig { version: "2".into(), ..WfqConfig::new(num_cores) }, locks))
}

/// Runs `w` under WFQ and swaps in [`wfq_v2`] at virtual time `at`.
pub fn upgrade_virtual(w: &Workload, at: u64, seed: u64) -> Result<Metrics, BenchError> {
    let mut sim = Sim::new(sim_config(w, seed));
    populate(&mut sim, w, &[PolicyKind::Wfq], PolicyParams::new(w.num_cores, seed))?;
    let next = wfq_v2(w.num_cores, &sim.lock_factory());
    sim.schedule_upgrade(at, 0, next);
    sim.run_until(w.duration_ns)?;
    Ok(sim.metrics())
}

pub fn upgrade_concurrent(w: &Workload, at: u64, cfg: SimConfig) -> Result<Metrics, BenchError> {
    let mut sim = ConcurrentSim::new(cfg.clone());
    let locks = sim.lock_factory();
    sim.set_policy(build(PolicyKind::Wfq, PolicyParams::new(cfg.num_cores, cfg.seed), &locks));
    sim.schedule_upgrade(at, wfq_v2(cfg.num_cores, &locks));
    for t in &w.tasks {
        sim.spawn(t.clone());
    }
    Ok(sim.run(w.duration_ns)?)
}

/// Records a single-class run into `out`.
pub fn record<W: Write + Send + 'static>(
    w: &Workload,
    kind: PolicyKind,
    cfg: SimConfig,
    ring_capacity: usize,
    out: W,
) -> Result<(Metrics, LogSummary), BenchError> {
    let concurrent = cfg.mode == crate::kernel::Mode::Concurrent;
    let header = LogHeader {
        policy: kind.name().into(),
        num_cores: cfg.num_cores,
        seed: cfg.seed,
        mode: if concurrent { LogMode::Concurrent } else { LogMode::VirtualTime },
    };
    let rec = Recorder::new(ring_capacity.max(1));
    let drainer = Drainer::spawn(rec.clone(), LogWriter::new(out, &header)?);
    let params = PolicyParams::new(cfg.num_cores, cfg.seed);
    let metrics = if concurrent {
        if w.hint_queue.is_some() {
            return Err(BenchError::Setup("hint queues are not supported in concurrent mode".into()));
        }
        let mut sim = ConcurrentSim::with_recorder(cfg.clone(), rec);
        sim.set_policy(build(kind, params, &sim.lock_factory()));
        for t in &w.tasks {
            sim.spawn(t.clone());
        }
        sim.run(w.duration_ns)
    } else {
        let mut sim = Sim::with_recorder(cfg, rec);
        populate(&mut sim, w, &[kind], params).and_then(|_| {
            sim.run_until(w.duration_ns)?;
            Ok(sim.metrics())
        })
        .map_err(|e| match e {
            BenchError::Sim(s) => s,
            other => SimError::Config(other.to_string()),
        })
    };
    let summary = drainer.finish()?;
    Ok((metrics?, summary))
}

pub fn record_default<W: Write + Send + 'static>(
    w: &Workload,
    kind: PolicyKind,
    cfg: SimConfig,
    out: W,
) -> Result<(Metrics, LogSummary), BenchError> {
    record(w, kind, cfg, DEFAULT_RING_CAPACITY, out)
}

/// Replays `log` against the policy it names, or against `policy` if given.
pub fn replay_log(log: &LoadedLog, policy: Option<PolicyKind>, opts: ReplayOptions) -> Result<ReplayReport, BenchError> {
    let kind = match policy {
        Some(k) => k,
        None => log.header.policy.parse().map_err(BenchError::Setup)?,
    };
    let params = PolicyParams::new(log.header.num_cores, log.header.seed);
    Ok(replay(log, |locks| build(kind, params, locks), opts)?)
}

/// Spread of completion times as a fraction of the latest one.
pub fn completion_spread(times: &[u64]) -> f64 {
    match (times.iter().min(), times.iter().max()) {
        (Some(&lo), Some(&hi)) if hi > 0 => (hi - lo) as f64 / hi as f64,
        _ => 0.0,
    }
}

pub fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}
