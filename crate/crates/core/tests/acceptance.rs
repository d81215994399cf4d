//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints one line whether it passes or not; exits non-zero if any
//! fails.

mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{fair_queue_oracle, FaultyPolicy, OracleTask};
use schedkit::api::{SchedMessage, SchedResponse};
use schedkit::bench::suites::SuiteConfig;
use schedkit::bench::{self, gen, BenchResult};
use schedkit::hints::{HintDirection, HintRecord};
use schedkit::kernel::{Metrics, Program, Sim, SimConfig, Step, TaskSpec, TraceEntry};
use schedkit::policies::{Arbiter, PolicyKind};
use schedkit::record::codec::decode_message;
use schedkit::record::log::{parse_log, SharedBuf};
use schedkit::record::replay::ReplayOptions;
use schedkit::record::EventKind;
use schedkit::{CoreId, TaskId};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn metric(r: &BenchResult, name: &str) -> Result<f64, String> {
    r.get(name).ok_or_else(|| format!("{} has no {name}", r.workload))
}

fn clean(m: &Metrics) -> Result<(), String> {
    let v = m.violations();
    if v.is_empty() {
        Ok(())
    } else {
        Err(v.join("; "))
    }
}

fn bench_err(e: bench::BenchError) -> String {
    e.to_string()
}

const SPREAD_MAX: f64 = 0.01;

fn c1_fairness() -> Outcome {
    let (r, m) = bench::suites::fairness_run(gen::FairnessScenario::OneCore, gen::FAIR_SOLO_NS, 1).map_err(bench_err)?;
    clean(&m)?;
    let spread = metric(&r, "completion_spread")?;
    let ratio = metric(&r, "makespan_over_solo")?;
    ensure(
        spread <= SPREAD_MAX && (4.8..=5.2).contains(&ratio),
        format!("spread {spread:.5} (max {SPREAD_MAX}), makespan/solo {ratio:.4} (want 4.8..5.2)"),
    )
}

fn c2_weighting() -> Outcome {
    let (r, m) = bench::suites::fairness_run(gen::FairnessScenario::Weighted, gen::FAIR_SOLO_NS, 1).map_err(bench_err)?;
    clean(&m)?;
    let spread = metric(&r, "completion_spread")?;
    let done: Vec<u64> = m.tasks.iter().map(|t| t.completed_at.unwrap_or(u64::MAX)).collect();
    let last_equal = *done[..4].iter().max().unwrap();
    let t5 = done[4];
    ensure(
        spread <= SPREAD_MAX && t5 > last_equal,
        format!("nice-0 spread {spread:.5}, last nice-0 done {last_equal} ns, nice-19 done {t5} ns"),
    )
}

fn p99_short(kind: PolicyKind, load: f64) -> Result<f64, String> {
    let (r, m) = bench::suites::bimodal_run(kind, load, &SuiteConfig::default()).map_err(bench_err)?;
    clean(&m)?;
    metric(&r, "response_p99_short")
}

fn c3_tail() -> Outcome {
    let (sh, wf) = (p99_short(PolicyKind::Shinjuku, 0.8)?, p99_short(PolicyKind::Wfq, 0.8)?);
    let (sl, wl) = (p99_short(PolicyKind::Shinjuku, 0.1)?, p99_short(PolicyKind::Wfq, 0.1)?);
    let high = sh / wf;
    let low = sl.max(wl) / sl.min(wl).max(1.0);
    ensure(
        high <= 0.2 && low <= 2.0,
        format!("load 0.8: shinjuku {sh} / wfq {wf} = {high:.4} (max 0.2); load 0.1: {sl} vs {wl}, ratio {low:.2} (max 2)"),
    )
}

fn c4_batch() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for load in bench::suites::BATCH_LOADS {
        let [(a, ma), (b, mb)] = bench::suites::batch_run(load, &SuiteConfig::default()).map_err(bench_err)?;
        clean(&ma)?;
        clean(&mb)?;
        let share = ma.cpu_share("batch");
        let (pa, pb) = (metric(&a, "response_p99_short")?, metric(&b, "response_p99_short")?);
        let change = (pa - pb).abs() / pb;
        ok &= share > 0.0 && change < 0.10;
        parts.push(format!("{load}: share {share:.3} p99 change {:.2}%", change * 100.0));
    }
    ensure(ok, parts.join(", "))
}

fn c5_upgrade() -> Outcome {
    let mut p = gen::SchbenchParams::new(2, 2);
    p.duration_ns = 200_000_000;
    p.warmup_ns = 0;
    let w = gen::schbench(&p);
    let m = bench::upgrade_concurrent(&w, p.duration_ns / 2, bench::concurrent_config(&w, 1)).map_err(bench_err)?;
    clean(&m)?;
    if !m.upgrade_errors.is_empty() {
        return Err(m.upgrade_errors.join("; "));
    }
    let [u] = &m.upgrades[..] else {
        return Err(format!("{} upgrades ran", m.upgrades.len()));
    };
    let kept = u.tasks_conserved() && u.tasks_after.len() == w.tasks.len();
    let vr = u.vruntime_before == u.vruntime_after && u.vruntime_before > 0;
    ensure(
        kept && vr && u.calls_during_hold == 0,
        format!(
            "tasks {}->{}, tokens {}->{}, vruntime {}->{}, calls in hold {}, blackout {} ns",
            u.tasks_before.len(),
            u.tasks_after.len(),
            u.tokens_before,
            u.tokens_after,
            u.vruntime_before,
            u.vruntime_after,
            u.calls_during_hold,
            u.blackout_ns
        ),
    )
}

/// Follows Issue/Revoke entries to know which serial and core are live for
/// each task, independently of the simulator's token table.
#[derive(Default)]
struct TokenAudit {
    live: BTreeMap<TaskId, (u64, CoreId)>,
    pending_reject: Option<(TaskId, u64)>,
    bad_dispatch: u64,
    bad_reject: u64,
    unrouted: u64,
    rejects: u64,
}

impl TokenAudit {
    fn see(&mut self, e: &TraceEntry) {
        if let Some(r) = self.pending_reject.take() {
            match *e {
                TraceEntry::PntErr { task, serial, .. } if (task, serial) == r => {}
                _ => self.unrouted += 1,
            }
        }
        match *e {
            TraceEntry::Issue { task, core, serial, .. } => {
                self.live.insert(task, (serial, core));
            }
            TraceEntry::Revoke { task, serial, .. } => {
                if self.live.remove(&task).map(|l| l.0) != Some(serial) {
                    self.bad_dispatch += 1;
                }
            }
            TraceEntry::Dispatch { core, task, serial, .. } => {
                if self.live.remove(&task) != Some((serial, core)) {
                    self.bad_dispatch += 1;
                }
            }
            TraceEntry::Reject { core, task, serial, .. } => {
                self.rejects += 1;
                if self.live.get(&task) == Some(&(serial, core)) {
                    self.bad_reject += 1;
                }
                self.pending_reject = Some((task, serial));
            }
            _ => {}
        }
    }
}

fn c6_token_fuzz() -> Outcome {
    const CORES: u32 = 4;
    let mut sim = Sim::new(SimConfig::new(CORES).seed(6));
    let policy = Arc::new(FaultyPolicy::new(CORES, 6, &sim.lock_factory()));
    sim.add_class(policy).map_err(|e| e.to_string())?;
    let audit = Arc::new(Mutex::new(TokenAudit::default()));
    let a = audit.clone();
    sim.set_observer(Box::new(move |e| a.lock().unwrap().see(e)));
    for i in 0..16 {
        let prog = Program::looping(vec![], vec![Step::Compute(20_000), Step::Yield]);
        sim.spawn(TaskSpec::new(format!("f{i}"), prog)).map_err(|e| e.to_string())?;
    }
    while sim.metrics().counters.decisions < 1_000_000 && sim.now() < 60_000_000_000 {
        sim.run_for(250_000_000).map_err(|e| e.to_string())?;
    }
    let m = sim.metrics();
    let a = audit.lock().unwrap();
    let c = &m.counters;
    ensure(
        c.decisions >= 1_000_000
            && m.invariants.invalid_dispatches == 0
            && a.bad_dispatch == 0
            && a.bad_reject == 0
            && a.unrouted == 0
            && a.rejects > 0
            && c.rejections == c.pnt_err_rejections
            && clean(&m).is_ok(),
        format!(
            "{} decisions, {} rejections ({} audited), {} through pnt_err, {} unrouted, {} invalid dispatches \
             (audit {}), {} good tokens refused",
            c.decisions,
            c.rejections,
            a.rejects,
            c.pnt_err_rejections,
            a.unrouted,
            m.invariants.invalid_dispatches,
            a.bad_dispatch,
            a.bad_reject
        ),
    )
}

fn c7_replay() -> Outcome {
    let mut p = gen::SchbenchParams::new(2, 2);
    p.duration_ns = 100_000_000;
    p.warmup_ns = 0;
    let w = gen::schbench(&p);
    if w.num_cores != 4 {
        return Err(format!("schbench 2x2 uses {} cores", w.num_cores));
    }
    let buf = SharedBuf::default();
    let (m, summary) =
        bench::record(&w, PolicyKind::Wfq, bench::concurrent_config(&w, 7), 1 << 22, buf.clone()).map_err(bench_err)?;
    clean(&m)?;
    let log = parse_log(&buf.bytes()).map_err(|e| e.to_string())?;
    let opts = ReplayOptions { deadlock_timeout: Duration::from_secs(20), ..Default::default() };
    let a = bench::replay_log(&log, None, opts).map_err(bench_err)?;
    let b = bench::replay_log(&log, None, opts).map_err(bench_err)?;
    let same = a.to_json() == b.to_json();

    // Every core is empty at the first unpinned placement, so the lowest
    // and highest tie-breaks answer 0 and 3 there.
    let diverge = log
        .calls()
        .find(|e| {
            e.kind == EventKind::Call
                && matches!(decode_message(&e.payload), Ok(SchedMessage::SelectTaskRq(r)) if r.pinned.is_none())
        })
        .map(|e| e.seq)
        .ok_or("no placement in the log")?;
    let short = ReplayOptions { deadlock_timeout: Duration::from_secs(2), ..Default::default() };
    let t = bench::replay_log(&log, Some(PolicyKind::WfqHighTie), short).map_err(bench_err)?;
    let first = t.first_mismatch().ok_or("tie-break change went unnoticed")?;
    let hit = first.seq == diverge
        && first.kind == "select_task_rq"
        && first.expected == format!("{:?}", SchedResponse::Core(CoreId(0)))
        && first.actual == format!("{:?}", SchedResponse::Core(CoreId(3)));
    ensure(
        summary.drops == 0 && a.mismatches.is_empty() && a.deadlock.is_none() && same && hit,
        format!(
            "{} events, {} drops, {} calls replayed, mismatches {}/{}, reports identical {same}; \
             tie-break change first differs at seq {} {} ({} -> {}), expected seq {diverge}",
            summary.events,
            summary.drops,
            a.replayed,
            a.mismatches.len(),
            b.mismatches.len(),
            first.seq,
            first.kind,
            first.expected,
            first.actual
        ),
    )
}

fn c8_locality() -> Outcome {
    let cfg = SuiteConfig::default();
    let (h, mh) = bench::suites::locality_run(true, &cfg).map_err(bench_err)?;
    let (r, mr) = bench::suites::locality_run(false, &cfg).map_err(bench_err)?;
    clean(&mh)?;
    clean(&mr)?;
    let (ph, pr) = (metric(&h, "wake_p99")?, metric(&r, "wake_p99")?);
    ensure(
        mh.counters.hints > 0 && ph <= 0.5 * pr,
        format!("p99 wake hinted {ph} ns vs random {pr} ns ({:.3}, max 0.5)", ph / pr),
    )
}

#[derive(Default)]
struct ArbiterAudit {
    shared: u64,
    late_reclaims: u64,
    dispatches: u64,
}

fn c9_arbiter() -> Outcome {
    const CORES: u32 = 6;
    const APPS: u64 = 3;
    const STEPS: usize = 10_000;
    let mut sim = Sim::new(SimConfig::new(CORES).seed(9));
    let arb = Arc::new(Arbiter::new(CORES, 1, &sim.lock_factory()));
    sim.add_class(arb.clone()).map_err(|e| e.to_string())?;
    let up = sim.create_queue(0, HintDirection::UserToSched, 64).map_err(|e| e.to_string())?;
    let mut app_of = BTreeMap::new();
    for app in 1..=APPS as u32 {
        for i in 0..3 {
            let prog = Program::looping(vec![], vec![Step::Compute(30_000 + 7_000 * i), Step::Sleep(10_000)]);
            let id = sim.spawn(TaskSpec::new(format!("a{app}"), prog).group(app)).map_err(|e| e.to_string())?;
            app_of.insert(id, app);
        }
    }
    let audit = Arc::new(Mutex::new(ArbiterAudit::default()));
    let (a, obs_arb, obs_apps) = (audit.clone(), arb.clone(), app_of.clone());
    sim.set_observer(Box::new(move |e| {
        let core = match *e {
            TraceEntry::Dispatch { core, .. } | TraceEntry::Idle { core, .. } => core,
            _ => return,
        };
        let mut a = a.lock().unwrap();
        a.dispatches += 1;
        // A reclaimed core is released by its next dispatch decision.
        if obs_arb.pending_reclaims().contains(&core) {
            a.late_reclaims += 1;
        }
        if let TraceEntry::Dispatch { task, .. } = *e {
            if obs_arb.owners()[core.index()].is_some_and(|o| Some(&o) != obs_apps.get(&task)) {
                a.shared += 1;
            }
        }
    }));

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut requested = [0u64; APPS as usize + 1];
    let mut over = 0u64;
    // Requests count once the arbiter has parsed them.
    let mut sent = std::collections::VecDeque::new();
    let mut parsed = 0;
    let mut reclaims = 0u64;
    let mut longest_ns = 0u64;
    let mut since: BTreeMap<CoreId, u64> = BTreeMap::new();
    for _ in 0..STEPS {
        if rng.random_bool(0.3) {
            let app = rng.random_range(1..=APPS);
            let n = if rng.random_bool(0.25) { 0 } else { rng.random_range(1..=CORES as u64) };
            sent.push_back((app, n));
            sim.send_hint(up, &HintRecord::from_words(&[app, n])).map_err(|e| e.to_string())?;
        }
        sim.run_for(rng.random_range(5_000..60_000)).map_err(|e| e.to_string())?;
        while parsed < sim.metrics().counters.hints {
            let (app, n) = sent.pop_front().ok_or("more hints parsed than sent")?;
            requested[app as usize] = n;
            parsed += 1;
        }
        let owners = arb.owners();
        let pending = arb.pending_reclaims();
        for app in 1..=APPS {
            let held =
                (0..CORES as usize).filter(|&c| owners[c] == Some(app as u32) && !pending.contains(&CoreId(c as u32))).count();
            if held as u64 > requested[app as usize] {
                over += 1;
            }
        }
        for c in &pending {
            if !since.contains_key(c) {
                since.insert(*c, sim.now());
                reclaims += 1;
            }
        }
        since.retain(|c, t0| {
            let keep = pending.contains(c);
            if !keep {
                longest_ns = longest_ns.max(sim.now() - *t0);
            }
            keep
        });
    }
    let m = sim.metrics();
    clean(&m)?;
    let a = audit.lock().unwrap();
    ensure(
        a.shared == 0 && over == 0 && a.late_reclaims == 0 && m.counters.hints > 0,
        format!(
            "{STEPS} steps, {} hints, {} dispatch events, {} foreign dispatches on owned cores, {over} steps over \
             request, {reclaims} busy reclaims, {} not released at the next dispatch, longest {} ns",
            m.counters.hints, a.dispatches, a.shared, a.late_reclaims, longest_ns
        ),
    )
}

fn wfq_dispatches(tasks: &[OracleTask]) -> Result<Vec<(u64, u64)>, String> {
    let mut sim = Sim::new(SimConfig::new(1).traced());
    let p = schedkit::policies::build(PolicyKind::Wfq, schedkit::policies::PolicyParams::new(1, 0), &sim.lock_factory());
    sim.add_class(p).map_err(|e| e.to_string())?;
    for t in tasks {
        let spec = TaskSpec::new("t", Program::once(vec![Step::Compute(t.compute_us * 1000)]))
            .nice(t.nice)
            .at(t.arrival_us * 1000);
        sim.spawn(spec).map_err(|e| e.to_string())?;
    }
    sim.run_until(None).map_err(|e| e.to_string())?;
    let m = sim.metrics();
    clean(&m)?;
    Ok(m.trace
        .iter()
        .filter_map(|e| match *e {
            TraceEntry::Dispatch { at, task, .. } => Some((at, task.0)),
            _ => None,
        })
        .collect())
}

fn c10_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cases = 300;
    let mut events = 0;
    for i in 0..cases {
        let n = rng.random_range(1..=3);
        let tasks: Vec<OracleTask> = (0..n)
            .map(|_| OracleTask {
                arrival_us: rng.random_range(0..8_000),
                compute_us: rng.random_range(100..12_000),
                nice: [0, 0, -3, 2, 19][rng.random_range(0..5)],
            })
            .collect();
        let (got, want) = (wfq_dispatches(&tasks)?, fair_queue_oracle(&tasks));
        if got != want {
            return Err(format!("case {i} {tasks:?}: wfq {got:?}, oracle {want:?}"));
        }
        events += got.len();
    }
    Ok(format!("{cases} cases, {events} dispatches identical"))
}

fn main() -> ExitCode {
    let checks: [(&str, &str, u64, fn() -> Outcome); 10] = [
        ("C1", "fairness on one core", 5, c1_fairness),
        ("C2", "nice weighting", 5, c2_weighting),
        ("C3", "shinjuku tail vs wfq", 60, c3_tail),
        ("C4", "batch co-location", 60, c4_batch),
        ("C5", "live upgrade", 30, c5_upgrade),
        ("C6", "token safety fuzz", 120, c6_token_fuzz),
        ("C7", "record/replay determinism", 120, c7_replay),
        ("C8", "locality hints", 30, c8_locality),
        ("C9", "arbiter safety", 30, c9_arbiter),
        ("C10", "oracle equivalence", 10, c10_oracle),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, budget, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| id.eq_ignore_ascii_case(f)) {
            continue;
        }
        let t0 = Instant::now();
        let out = check();
        let secs = t0.elapsed().as_secs_f64();
        let in_time = secs < budget as f64;
        let (verdict, detail) = match &out {
            Ok(d) if in_time => ("PASS", d.clone()),
            Ok(d) => ("FAIL", format!("{d}; over the {budget}s budget")),
            Err(d) => ("FAIL", d.clone()),
        };
        if verdict == "FAIL" {
            failed += 1;
        }
        println!("{id:<4} {verdict} {name}  [{secs:.1}s/{budget}s]  {detail}");
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
