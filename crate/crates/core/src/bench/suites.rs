//! Named benchmark suites.
//!
//! `scale` multiplies message counts and run lengths; 1.0 is desk scale and
//! 10.0 matches the original experiment sizes.

use super::gen::{self, BimodalParams, FairnessScenario, SchbenchParams};
use super::{
    completion_spread, record, replay_log, run_virtual, std_dev, upgrade_virtual, BenchError, BenchResult,
    DatFile,
};
use crate::kernel::{percentile, Metrics};
use crate::policies::PolicyKind;
use crate::record::log::{parse_log, SharedBuf};
use crate::record::replay::ReplayOptions;

pub const SUITES: [&str; 8] = ["fairness", "pingpong", "schbench", "bimodal", "batch", "locality", "upgrade", "replay"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteConfig {
    pub seed: u64,
    pub scale: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig { seed: 1, scale: 1.0 }
    }
}

impl SuiteConfig {
    fn scaled(&self, v: u64) -> u64 {
        ((v as f64 * self.scale) as u64).max(1)
    }
}

#[derive(Debug, Default)]
pub struct SuiteOutput {
    pub results: Vec<BenchResult>,
    pub plots: Vec<DatFile>,
    /// Invariant violations seen in any run, prefixed by workload and policy.
    pub violations: Vec<String>,
}

impl SuiteOutput {
    fn absorb(&mut self, r: &BenchResult, m: &Metrics) {
        for v in m.violations() {
            self.violations.push(format!("{}/{}: {v}", r.workload, r.policy));
        }
    }
}

pub fn run_suite(name: &str, cfg: &SuiteConfig) -> Result<SuiteOutput, BenchError> {
    let mut out = SuiteOutput::default();
    let names: Vec<&str> = if name == "all" { SUITES.to_vec() } else { vec![name] };
    for n in names {
        match n {
            "fairness" => fairness(cfg, &mut out)?,
            "pingpong" => pingpong(cfg, &mut out)?,
            "schbench" => schbench(cfg, &mut out)?,
            "bimodal" => bimodal(cfg, &mut out)?,
            "batch" => batch(cfg, &mut out)?,
            "locality" => locality(cfg, &mut out)?,
            "upgrade" => upgrade(cfg, &mut out)?,
            "replay" => replay(cfg, &mut out)?,
            other => {
                return Err(BenchError::Setup(format!("unknown suite {other:?}, expected all or {}", SUITES.join(", "))))
            }
        }
    }
    Ok(out)
}

/// Per-task completion times, their spread, makespan over solo time, and
/// runtime deviation for one fairness scenario.
pub fn fairness_run(s: FairnessScenario, solo_ns: u64, seed: u64) -> Result<(BenchResult, Metrics), BenchError> {
    let w = gen::fairness(s, solo_ns);
    let m = run_virtual(&w, &[PolicyKind::Wfq], seed)?;
    let mut r = BenchResult::new(&w.name, "wfq", seed);
    let done: Vec<u64> = m.tasks.iter().map(|t| t.completed_at.unwrap_or(0)).collect();
    for (t, c) in m.tasks.iter().zip(&done) {
        r.push(format!("completion_{}", t.label), *c as f64, "ns");
    }
    let equal: Vec<u64> = match s {
        FairnessScenario::Weighted => done[..4].to_vec(),
        _ => done.clone(),
    };
    r.push("completion_spread", completion_spread(&equal), "fraction");
    let makespan = *done.iter().max().unwrap_or(&0);
    r.push("makespan", makespan as f64, "ns");
    r.push("makespan_over_solo", makespan as f64 / solo_ns as f64, "ratio");
    let runtimes: Vec<f64> = m.tasks.iter().map(|t| t.runtime_ns as f64).collect();
    r.push("runtime_stddev", std_dev(&runtimes), "ns");
    r.push("violations", m.violations().len() as f64, "count");
    Ok((r, m))
}

fn fairness(cfg: &SuiteConfig, out: &mut SuiteOutput) -> Result<(), BenchError> {
    let solo = cfg.scaled(gen::FAIR_SOLO_NS);
    for s in FairnessScenario::ALL {
        let (r, m) = fairness_run(s, solo, cfg.seed)?;
        out.absorb(&r, &m);
        out.results.push(r);
    }
    Ok(())
}

fn pingpong(cfg: &SuiteConfig, out: &mut SuiteOutput) -> Result<(), BenchError> {
    let n = cfg.scaled(100_000);
    for same in [true, false] {
        let w = gen::pingpong(n, same);
        for kind in [PolicyKind::Wfq, PolicyKind::Shinjuku] {
            let m = run_virtual(&w, &[kind], cfg.seed)?;
            let mut r = BenchResult::new(&w.name, kind.name(), cfg.seed);
            r.add_standard(&m, 0);
            r.push("round_trip", m.end_ns as f64 / n as f64, "ns");
            out.absorb(&r, &m);
            out.results.push(r);
        }
    }
    Ok(())
}

fn schbench_params(cfg: &SuiteConfig, messages: u32, workers: u32) -> SchbenchParams {
    let base = SchbenchParams::new(messages, workers);
    SchbenchParams {
        duration_ns: cfg.scaled(base.duration_ns),
        warmup_ns: cfg.scaled(base.warmup_ns),
        ..base
    }
}

fn schbench(cfg: &SuiteConfig, out: &mut SuiteOutput) -> Result<(), BenchError> {
    for (msg, workers) in [(2, 2), (2, 40)] {
        let mut p = schbench_params(cfg, msg, workers);
        if workers >= 40 {
            // Large fan-out is the expensive case; a shorter window keeps
            // `bench --suite all` at desk speed.
            p.duration_ns /= 3;
            p.warmup_ns /= 3;
        }
        let w = gen::schbench(&p);
        for kind in [PolicyKind::Wfq, PolicyKind::Shinjuku] {
            let m = run_virtual(&w, &[kind], cfg.seed)?;
            let mut r = BenchResult::new(&w.name, kind.name(), cfg.seed);
            r.add_standard(&m, p.warmup_ns);
            out.absorb(&r, &m);
            out.results.push(r);
        }
    }
    Ok(())
}

pub const BIMODAL_LOADS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// One bimodal run; returns p99 short-request response time with the rows.
pub fn bimodal_run(kind: PolicyKind, load: f64, cfg: &SuiteConfig) -> Result<(BenchResult, Metrics), BenchError> {
    let base = BimodalParams::new(load, cfg.seed);
    let p = BimodalParams { duration_ns: cfg.scaled(base.duration_ns), warmup_ns: cfg.scaled(base.warmup_ns), ..base };
    let w = gen::bimodal(&p).map_err(BenchError::Setup)?;
    let m = run_virtual(&w, &[kind], cfg.seed)?;
    let mut r = BenchResult::new(&w.name, kind.name(), cfg.seed);
    r.add_standard(&m, p.warmup_ns);
    r.push("load", load, "fraction");
    Ok((r, m))
}

fn bimodal(cfg: &SuiteConfig, out: &mut SuiteOutput) -> Result<(), BenchError> {
    let mut dat = DatFile {
        name: "bimodal_p99".into(),
        columns: vec!["load".into(), "wfq_p99_short_ns".into(), "shinjuku_p99_short_ns".into()],
        rows: Vec::new(),
    };
    for load in BIMODAL_LOADS {
        let mut row = vec![load];
        for kind in [PolicyKind::Wfq, PolicyKind::Shinjuku] {
            let (r, m) = bimodal_run(kind, load, cfg)?;
            row.push(r.get("response_p99_short").unwrap_or(0.0));
            out.absorb(&r, &m);
            out.results.push(r);
        }
        dat.rows.push(row);
    }
    out.plots.push(dat);
    Ok(())
}

/// Bimodal under Shinjuku with and without nice-19 WFQ batch work on the
/// same cores. Returns (with-batch, without-batch) results.
pub fn batch_run(load: f64, cfg: &SuiteConfig) -> Result<[(BenchResult, Metrics); 2], BenchError> {
    let base = BimodalParams::new(load, cfg.seed);
    let p = BimodalParams { duration_ns: cfg.scaled(base.duration_ns), warmup_ns: cfg.scaled(base.warmup_ns), ..base };
    let with = gen::batch_colo(&p, gen::BIMODAL_CORES).map_err(BenchError::Setup)?;
    let mut without = with.clone();
    without.tasks.retain(|t| t.class == 0);
    without.name = format!("bimodal-alone-{load:.2}");
    let mut runs = Vec::new();
    for (w, kinds) in [(&with, &[PolicyKind::Shinjuku, PolicyKind::Wfq][..]), (&without, &[PolicyKind::Shinjuku][..])] {
        let m = run_virtual(w, kinds, cfg.seed)?;
        let policy = kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join("+");
        let mut r = BenchResult::new(&w.name, policy, cfg.seed);
        r.add_standard(&m, p.warmup_ns);
        r.push("load", load, "fraction");
        runs.push((r, m));
    }
    let b = runs.pop().unwrap();
    let a = runs.pop().unwrap();
    Ok([a, b])
}

pub const BATCH_LOADS: [f64; 4] = [0.2, 0.5, 0.8, 0.95];

fn batch(cfg: &SuiteConfig, out: &mut SuiteOutput) -> Result<(), BenchError> {
    let mut dat = DatFile {
        name: "batch_colo".into(),
        columns: vec!["load".into(), "batch_share".into(), "p99_with_batch_ns".into(), "p99_alone_ns".into()],
        rows: Vec::new(),
    };
    for load in BATCH_LOADS {
        let [(mut a, ma), (b, mb)] = batch_run(load, cfg)?;
        let (pa, pb) = (a.get("response_p99_short").unwrap_or(0.0), b.get("response_p99_short").unwrap_or(0.0));
        let change = if pb > 0.0 { (pa - pb).abs() / pb } else { 0.0 };
        a.push("p99_change_vs_alone", change, "fraction");
        dat.rows.push(vec![load, ma.cpu_share("batch"), pa, pb]);
        out.absorb(&a, &ma);
        out.absorb(&b, &mb);
        out.results.push(a);
        out.results.push(b);
    }
    out.plots.push(dat);
    Ok(())
}

/// Worker-wakeup p99 of the locality schbench with hints on and off.
pub fn locality_run(hints: bool, cfg: &SuiteConfig) -> Result<(BenchResult, Metrics), BenchError> {
    let mut p = schbench_params(cfg, 2, 2);
    p.hints = hints;
    p.worker_compute_ns = 1_000;
    p.message_sleep_ns = 20_000;
    p.duration_ns /= 3;
    p.warmup_ns /= 5;
    let mut w = gen::schbench(&p);
    w.name = format!("schbench-locality-{}", if hints { "hinted" } else { "random" });
    let m = run_virtual(&w, &[PolicyKind::Locality], cfg.seed)?;
    let mut r = BenchResult::new(&w.name, "locality", cfg.seed);
    r.add_standard(&m, p.warmup_ns);
    r.push("hints_delivered", m.counters.hints as f64, "count");
    Ok((r, m))
}

fn locality(cfg: &SuiteConfig, out: &mut SuiteOutput) -> Result<(), BenchError> {
    for hints in [true, false] {
        let (r, m) = locality_run(hints, cfg)?;
        out.absorb(&r, &m);
        out.results.push(r);
    }
    Ok(())
}

fn upgrade(cfg: &SuiteConfig, out: &mut SuiteOutput) -> Result<(), BenchError> {
    let mut p = schbench_params(cfg, 2, 2);
    p.duration_ns /= 3;
    p.warmup_ns = 0;
    let w = gen::schbench(&p);
    let m = upgrade_virtual(&w, p.duration_ns / 2, cfg.seed)?;
    let mut r = BenchResult::new(format!("{}-upgrade", w.name), "wfq", cfg.seed);
    for u in &m.upgrades {
        r.push("upgrade_blackout", u.blackout_ns as f64, "ns");
        r.push("tasks_conserved", u.tasks_conserved() as u8 as f64, "bool");
        r.push("vruntime_before", u.vruntime_before as f64, "ns");
        r.push("vruntime_after", u.vruntime_after as f64, "ns");
        r.push("calls_during_hold", u.calls_during_hold as f64, "count");
    }
    r.push("upgrade_failures", m.counters.upgrade_failures as f64, "count");
    r.push("violations", m.violations().len() as f64, "count");
    out.absorb(&r, &m);
    out.results.push(r);
    Ok(())
}

/// Ring slots for the replay suite; the drainer must never fall behind.
const REPLAY_RING: usize = 1 << 22;

fn replay(cfg: &SuiteConfig, out: &mut SuiteOutput) -> Result<(), BenchError> {
    let w = gen::pingpong(cfg.scaled(2_000), false);
    let buf = SharedBuf::default();
    let (m, summary) = record(&w, PolicyKind::Wfq, super::sim_config(&w, cfg.seed), REPLAY_RING, buf.clone())?;
    let log = parse_log(&buf.bytes()).map_err(|e| BenchError::Setup(e.to_string()))?;
    let report = replay_log(&log, None, ReplayOptions::default())?;
    let mut r = BenchResult::new(format!("{}-replay", w.name), "wfq", cfg.seed);
    r.push("events", summary.events as f64, "count");
    r.push("drops", summary.drops as f64, "count");
    r.push("replayed", report.replayed as f64, "count");
    r.push("mismatches", report.mismatches.len() as f64, "count");
    r.push("stalls", report.stalls as f64, "count");
    let wakes = m.wake_latencies(None, 0);
    r.push("wake_p99", percentile(&wakes, 99.0) as f64, "ns");
    out.absorb(&r, &m);
    out.results.push(r);
    Ok(())
}
