//! Workload generators. Every generator is a pure function of its
//! parameters and seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::api::CoreId;
use crate::kernel::{HintWord, Program, Step, TaskSpec, Workload};

pub const SHORT_NS: u64 = 4_000;
pub const LONG_NS: u64 = 10_000_000;
pub const LONG_FRACTION: f64 = 0.005;
/// Worker cores the bimodal load is scaled against.
pub const BIMODAL_CORES: u32 = 5;

/// Mean bimodal service time in ns.
pub fn bimodal_mean_ns() -> f64 {
    (1.0 - LONG_FRACTION) * SHORT_NS as f64 + LONG_FRACTION * LONG_NS as f64
}

/// Ping-pong: `pong` is spawned first so it is already blocked when the
/// first message arrives, making every message exactly one wakeup.
pub fn pingpong(messages: u64, same_core: bool) -> Workload {
    let ping = Program::repeated(vec![], vec![Step::Signal(1), Step::Block(2)], messages);
    let pong = Program::repeated(vec![], vec![Step::Block(1), Step::Signal(2)], messages);
    let (mut a, mut b) = (TaskSpec::new("pong", pong), TaskSpec::new("ping", ping));
    if same_core {
        a.pinned = Some(CoreId(0));
        b.pinned = Some(CoreId(0));
    } else {
        a.pinned = Some(CoreId(0));
        b.pinned = Some(CoreId(1));
    }
    Workload {
        name: if same_core { "pingpong-same-core" } else { "pingpong-two-core" }.into(),
        num_cores: if same_core { 1 } else { 2 },
        tasks: vec![a, b],
        ..Default::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchbenchParams {
    pub message_threads: u32,
    /// Workers per message thread.
    pub workers: u32,
    pub worker_compute_ns: u64,
    /// Pause between a message thread's rounds.
    pub message_sleep_ns: u64,
    pub num_cores: u32,
    pub duration_ns: u64,
    pub warmup_ns: u64,
    /// Tasks of each message thread send a `{task, group}` hint first.
    pub hints: bool,
}

impl SchbenchParams {
    pub fn new(message_threads: u32, workers: u32) -> Self {
        SchbenchParams {
            message_threads,
            workers,
            worker_compute_ns: 50_000,
            message_sleep_ns: 100_000,
            num_cores: message_threads * workers,
            duration_ns: 1_500_000_000,
            warmup_ns: 500_000_000,
            hints: false,
        }
    }
}

/// Message threads wake their workers, which compute and reply; the message
/// thread waits for every reply before sleeping and starting again. Worker
/// `w` of message thread `m` blocks on event `1000 * (m + 1) + w`; the
/// message thread collects replies on event `m`.
pub fn schbench(p: &SchbenchParams) -> Workload {
    let mut tasks = Vec::new();
    for m in 0..p.message_threads {
        let group = m + 1;
        let ev = |w: u32| 1000 * (m + 1) + w;
        let hint = || Step::Hint(vec![HintWord::SelfTask, HintWord::SelfGroup]);
        let prologue = if p.hints { vec![hint()] } else { vec![] };
        let mut body: Vec<Step> = (0..p.workers).map(|w| Step::Signal(ev(w))).collect();
        body.extend((0..p.workers).map(|_| Step::Block(m)));
        body.push(Step::Sleep(p.message_sleep_ns));
        tasks.push(TaskSpec::new("message", Program::looping(prologue.clone(), body)).group(group));
        for w in 0..p.workers {
            let body = vec![Step::Block(ev(w)), Step::Compute(p.worker_compute_ns), Step::Signal(m)];
            tasks.push(TaskSpec::new("worker", Program::looping(prologue.clone(), body)).group(group));
        }
    }
    Workload {
        name: format!("schbench-{}x{}", p.message_threads, p.workers),
        num_cores: p.num_cores,
        tasks,
        duration_ns: Some(p.duration_ns),
        warmup_ns: p.warmup_ns,
        policies: Vec::new(),
        hint_queue: p.hints.then_some(256),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BimodalParams {
    pub load: f64,
    pub duration_ns: u64,
    pub warmup_ns: u64,
    pub nice: i8,
    pub seed: u64,
}

impl BimodalParams {
    pub fn new(load: f64, seed: u64) -> Self {
        BimodalParams { load, duration_ns: 1_000_000_000, warmup_ns: 100_000_000, nice: 0, seed }
    }
}

/// Open-loop Poisson arrivals of one-shot requests on [`BIMODAL_CORES`]
/// cores: 99.5% compute [`SHORT_NS`], 0.5% compute [`LONG_NS`]. Arrivals
/// stop at `duration_ns`; the run lasts until every request finishes.
pub fn bimodal(p: &BimodalParams) -> Result<Workload, String> {
    if !(p.load > 0.0 && p.load <= 1.0) {
        return Err(format!("load {} outside (0, 1]", p.load));
    }
    let rate_per_ns = p.load * BIMODAL_CORES as f64 / bimodal_mean_ns();
    let gap = Exp::new(rate_per_ns).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut t = 0.0;
    let mut tasks = Vec::new();
    loop {
        t += gap.sample(&mut rng);
        if t >= p.duration_ns as f64 {
            break;
        }
        let (label, ns) = if rng.random::<f64>() < LONG_FRACTION { ("long", LONG_NS) } else { ("short", SHORT_NS) };
        tasks.push(TaskSpec::new(label, Program::once(vec![Step::Compute(ns)])).nice(p.nice).at(t as u64));
    }
    Ok(Workload {
        name: format!("bimodal-{:.2}", p.load),
        num_cores: BIMODAL_CORES,
        tasks,
        duration_ns: None,
        warmup_ns: p.warmup_ns,
        policies: Vec::new(),
        hint_queue: None,
    })
}

/// The bimodal load at nice −20 in class 0 plus one nice-19 CPU-bound batch
/// task per core in class 1. Batch tasks never finish, so the run is bounded
/// by the last request's arrival plus a drain margin.
pub fn batch_colo(p: &BimodalParams, batch_tasks: u32) -> Result<Workload, String> {
    let mut w = bimodal(&BimodalParams { nice: -20, ..*p })?;
    w.name = format!("batch-colo-{:.2}", p.load);
    for _ in 0..batch_tasks {
        let spin = Program::looping(vec![], vec![Step::Compute(1_000_000)]);
        w.tasks.push(TaskSpec::new("batch", spin).nice(19).class(1));
    }
    w.duration_ns = Some(p.duration_ns + 2 * LONG_NS * 10);
    Ok(w)
}

/// CPU time each fairness task needs when running alone.
pub const FAIR_SOLO_NS: u64 = 460_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FairnessScenario {
    /// Five tasks, five cores.
    Spread,
    /// Five tasks pinned to core 0.
    OneCore,
    /// Like [`FairnessScenario::OneCore`] with task 5 at nice 19.
    Weighted,
    /// One task per core; task 1 moves onto core 1 halfway through.
    Migration,
}

impl FairnessScenario {
    pub const ALL: [FairnessScenario; 4] =
        [FairnessScenario::Spread, FairnessScenario::OneCore, FairnessScenario::Weighted, FairnessScenario::Migration];

    pub fn name(self) -> &'static str {
        match self {
            FairnessScenario::Spread => "spread",
            FairnessScenario::OneCore => "one-core",
            FairnessScenario::Weighted => "weighted",
            FairnessScenario::Migration => "migration",
        }
    }
}

/// `solo_ns` is each task's CPU demand; [`FAIR_SOLO_NS`] at desk scale.
pub fn fairness(s: FairnessScenario, solo_ns: u64) -> Workload {
    let spin = Program::once(vec![Step::Compute(solo_ns)]);
    let half = solo_ns / 2;
    let tasks = (0..5u32)
        .map(|i| {
            let label = format!("t{}", i + 1);
            match s {
                FairnessScenario::Spread => TaskSpec::new(label, spin.clone()).pinned(i),
                FairnessScenario::OneCore => TaskSpec::new(label, spin.clone()).pinned(0),
                FairnessScenario::Weighted => {
                    TaskSpec::new(label, spin.clone()).pinned(0).nice(if i == 4 { 19 } else { 0 })
                }
                FairnessScenario::Migration if i == 0 => TaskSpec::new(
                    label,
                    Program::once(vec![Step::Compute(half), Step::Migrate(1), Step::Compute(solo_ns - half)]),
                )
                .pinned(0),
                FairnessScenario::Migration => TaskSpec::new(label, spin.clone()).pinned(i),
            }
        })
        .collect();
    Workload {
        name: format!("fairness-{}", s.name()),
        num_cores: match s {
            FairnessScenario::OneCore | FairnessScenario::Weighted => 1,
            _ => 5,
        },
        tasks,
        ..Default::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schbench_shape() {
        let w = schbench(&SchbenchParams::new(2, 2));
        assert_eq!(w.tasks.iter().filter(|t| t.label == "worker").count(), 4);
        assert_eq!(w.tasks.iter().filter(|t| t.label == "message").count(), 2);
        let big = SchbenchParams { num_cores: 80, ..SchbenchParams::new(2, 40) };
        let w = schbench(&big);
        assert_eq!(w.tasks.iter().filter(|t| t.label == "worker").count() as u32, w.num_cores);
    }

    #[test]
    fn bimodal_is_seeded_and_scaled() {
        let a = bimodal(&BimodalParams::new(0.5, 7)).unwrap();
        let b = bimodal(&BimodalParams::new(0.5, 7)).unwrap();
        assert_eq!(a, b);
        let rate = 0.5 * 5.0 / bimodal_mean_ns();
        let expect = rate * 1e9;
        let n = a.tasks.len() as f64;
        assert!((n - expect).abs() < 4.0 * expect.sqrt(), "{n} arrivals, expected about {expect}");
        assert!(bimodal(&BimodalParams::new(0.0, 1)).is_err());
        assert!(bimodal(&BimodalParams::new(1.5, 1)).is_err());
    }

    #[test]
    fn bimodal_mean_service() {
        assert!((bimodal_mean_ns() - 53_980.0).abs() < 1e-6);
    }
}
