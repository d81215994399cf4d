//! The wall-clock engine: one OS thread per simulated core.
//!
//! Virtual time is wall time since start multiplied by
//! [`SimConfig::time_scale`], so runs are not reproducible. Its purpose is to
//! let policy calls for different cores genuinely overlap, which is what
//! recording and replaying lock order needs.
//!
//! Framework bookkeeping sits behind one mutex that is never held across a
//! policy call. Calls concerning a core are serialized by that core's gate;
//! a worker that migrates a task also holds the source core's gate, so the
//! source cannot pick the task mid-move. Only one policy class is supported.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, MutexGuard};
use sha2::{Digest, Sha256};

use super::metrics::{Counters, InvariantReport, LatencySample, Metrics, TaskReport, TraceEntry, WaitCause};
use super::program::{Cursor, EventTable, Step};
use super::workload::TaskSpec;
use super::{SimConfig, SimError, MAX_PNT_ERRS};
use crate::api::{
    CoreId, MessageKind, SchedMessage, SchedResponse, SchedulerPolicy, SelectRq, TaskAttrs, TaskId, TokenRegistry,
    Verdict,
};
use crate::record::{LockFactory, Recorder};
use crate::registry::{Registration, Registry, UpgradeReport};

const POLICY_ID: u32 = 1;
/// Longest a worker sleeps before rechecking, in wall time.
const MAX_NAP: Duration = Duration::from_millis(2);
const RUNAWAY_STEPS: u32 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TState {
    Pending,
    Runnable(CoreId),
    Running(CoreId),
    Blocked,
    Dead,
}

struct Task {
    spec: TaskSpec,
    label: u32,
    state: TState,
    cursor: Cursor,
    remaining: Option<u64>,
    unreported: u64,
    last_core: Option<CoreId>,
    pinned: Option<CoreId>,
    waiting: Option<(u64, WaitCause)>,
    report: TaskReport,
}

#[derive(Debug, Clone, Copy)]
struct Running {
    task: TaskId,
    since: u64,
    /// When the current compute step finishes, if it is computing.
    until: Option<u64>,
}

struct Core {
    current: Option<Running>,
    dispatch: bool,
    preempt: bool,
    next_tick: u64,
    timer: Option<u64>,
    busy_ns: u64,
}

struct State {
    tasks: Vec<Task>,
    cores: Vec<Core>,
    tokens: TokenRegistry,
    sync: EventTable,
    /// (wake time, task), for sleeps and future arrivals.
    alarms: Vec<(u64, TaskId)>,
    live: usize,
    done: bool,
    latencies: Vec<LatencySample>,
    messages: BTreeMap<MessageKind, u64>,
    counters: Counters,
    inv: InvariantReport,
    digest: Sha256,
    trace: Vec<TraceEntry>,
    keep_trace: bool,
    end_ns: u64,
}

impl State {
    fn t(&mut self, id: TaskId) -> &mut Task {
        &mut self.tasks[id.0 as usize - 1]
    }

    fn record(&mut self, entry: TraceEntry) {
        self.digest.update(entry.bytes());
        if self.keep_trace {
            self.trace.push(entry);
        }
    }

    fn settle(&mut self, c: usize, now: u64) {
        let Some(run) = self.cores[c].current else {
            return;
        };
        let d = now.saturating_sub(run.since);
        self.cores[c].busy_ns += d;
        self.cores[c].current = Some(Running { since: now, ..run });
        let t = self.t(run.task);
        t.report.runtime_ns += d;
        t.unreported += d;
        if let Some(r) = &mut t.remaining {
            *r = r.saturating_sub(d);
        }
    }
}

/// Messages a worker owes the policy after a locked bookkeeping pass.
enum Owed {
    Blocked { task: TaskId, delta: u64 },
    Dead { task: TaskId, delta: u64 },
    Tick { task: TaskId, delta: u64 },
}

#[derive(Default)]
struct Work {
    owed: Vec<Owed>,
    /// Tasks to place and wake, with the waking core.
    wakes: Vec<(TaskId, Option<CoreId>)>,
    arrivals: Vec<TaskId>,
}

struct Engine {
    cfg: SimConfig,
    start: Instant,
    state: Mutex<State>,
    bells: Vec<Condvar>,
    gates: Vec<Mutex<()>>,
    reg: Arc<Registration>,
    limit: Option<u64>,
}

pub struct ConcurrentSim {
    cfg: SimConfig,
    registry: Registry,
    locks: LockFactory,
    policy: Option<Arc<dyn SchedulerPolicy>>,
    specs: Vec<TaskSpec>,
    upgrade: Option<(u64, Arc<dyn SchedulerPolicy>)>,
}

impl ConcurrentSim {
    pub fn new(cfg: SimConfig) -> Self {
        ConcurrentSim {
            cfg,
            registry: Registry::new(),
            locks: LockFactory::plain(),
            policy: None,
            specs: Vec::new(),
            upgrade: None,
        }
    }

    pub fn with_recorder(cfg: SimConfig, recorder: Arc<Recorder>) -> Self {
        ConcurrentSim {
            registry: Registry::with_recorder(recorder.clone()),
            locks: LockFactory::recording(recorder),
            ..Self::new(cfg)
        }
    }

    pub fn lock_factory(&self) -> LockFactory {
        self.locks.clone()
    }

    pub fn set_policy(&mut self, policy: Arc<dyn SchedulerPolicy>) {
        self.policy = Some(policy);
    }

    /// Tasks are placed when the run starts, or at their arrival time.
    pub fn spawn(&mut self, spec: TaskSpec) -> TaskId {
        self.specs.push(spec);
        TaskId(self.specs.len() as u64)
    }

    /// Upgrades the policy from a control thread once virtual time reaches `at`.
    pub fn schedule_upgrade(&mut self, at: u64, policy: Arc<dyn SchedulerPolicy>) {
        self.upgrade = Some((at, policy));
    }

    /// Runs until every task exits or virtual time reaches `limit`.
    pub fn run(self, limit: Option<u64>) -> Result<Metrics, SimError> {
        let n = self.cfg.num_cores;
        if n == 0 || self.cfg.tick_period_ns == 0 || self.cfg.time_scale <= 0.0 {
            return Err(SimError::Config("concurrent mode needs cores, a tick period and a positive time scale".into()));
        }
        if limit.is_none() && self.specs.iter().any(|s| s.program.total_compute().is_none()) {
            return Err(SimError::Config("unbounded tasks need a time limit".into()));
        }
        let policy = self.policy.ok_or_else(|| SimError::Config("no policy set".into()))?;
        let reg = self.registry.register(POLICY_ID, policy)?;
        let mut labels: Vec<String> = Vec::new();
        let mut tasks = Vec::new();
        for (i, spec) in self.specs.into_iter().enumerate() {
            if spec.class != 0 {
                return Err(SimError::Config("concurrent mode runs a single policy class".into()));
            }
            if spec.pinned.is_some_and(|c| c.0 >= n) {
                return Err(SimError::Config(format!("task pinned to missing core {:?}", spec.pinned)));
            }
            let label = match labels.iter().position(|l| *l == spec.label) {
                Some(p) => p as u32,
                None => {
                    labels.push(spec.label.clone());
                    labels.len() as u32 - 1
                }
            };
            let report = TaskReport {
                id: TaskId(i as u64 + 1),
                label: spec.label.clone(),
                class: 0,
                nice: spec.nice,
                group: spec.group,
                spawned_at: spec.arrival_ns,
                first_run_at: None,
                completed_at: None,
                runtime_ns: 0,
                runs: 0,
            };
            tasks.push(Task {
                pinned: spec.pinned,
                spec,
                label,
                state: TState::Pending,
                cursor: Cursor::default(),
                remaining: None,
                unreported: 0,
                last_core: None,
                waiting: None,
                report,
            });
        }
        let alarms = tasks.iter().map(|t| (t.spec.arrival_ns, t.report.id)).collect();
        let p = self.cfg.tick_period_ns;
        let cores = (0..n)
            .map(|_| Core { current: None, dispatch: true, preempt: false, next_tick: p, timer: None, busy_ns: 0 })
            .collect();
        let live = tasks.len();
        let state = State {
            tasks,
            cores,
            tokens: TokenRegistry::new(),
            sync: EventTable::default(),
            alarms,
            live,
            done: live == 0 && limit.is_none(),
            latencies: Vec::new(),
            messages: BTreeMap::new(),
            counters: Counters::default(),
            inv: InvariantReport::default(),
            digest: Sha256::new(),
            trace: Vec::new(),
            keep_trace: self.cfg.trace,
            end_ns: 0,
        };
        let engine = Arc::new(Engine {
            start: Instant::now(),
            state: Mutex::new(state),
            bells: (0..n).map(|_| Condvar::new()).collect(),
            gates: (0..n).map(|_| Mutex::new(())).collect(),
            reg,
            limit,
            cfg: self.cfg.clone(),
        });

        let mut first_err: Option<SimError> = None;
        let (upgrades, upgrade_errors) = thread::scope(|s| {
            let workers: Vec<_> = (0..n)
                .map(|c| {
                    let e = engine.clone();
                    thread::Builder::new()
                        .name(format!("core-{c}"))
                        .spawn_scoped(s, move || e.worker(c as usize))
                        .expect("spawn worker")
                })
                .collect();
            let control = self.upgrade.map(|(at, policy)| {
                let e = engine.clone();
                let registry = &self.registry;
                s.spawn(move || e.control(registry, at, policy))
            });
            for w in workers {
                match w.join() {
                    Ok(Ok(())) => {}
                    Ok(Err(err)) => {
                        first_err.get_or_insert(err);
                    }
                    Err(_) => {
                        first_err.get_or_insert(SimError::Config("worker thread panicked".into()));
                    }
                }
            }
            engine.finish();
            match control.map(|c| c.join()) {
                Some(Ok(Some(Ok(r)))) => (vec![r], vec![]),
                Some(Ok(Some(Err(e)))) => (vec![], vec![e]),
                _ => (vec![], vec![]),
            }
        });
        if let Some(e) = first_err {
            return Err(e);
        }
        Ok(engine.metrics(labels, upgrades, upgrade_errors))
    }
}

impl Engine {
    fn now(&self) -> u64 {
        (self.start.elapsed().as_nanos() as f64 * self.cfg.time_scale) as u64
    }

    fn to_wall(&self, vns: u64) -> Duration {
        Duration::from_nanos((vns as f64 / self.cfg.time_scale) as u64)
    }

    fn finish(&self) {
        let mut st = self.state.lock();
        st.done = true;
        for b in &self.bells {
            b.notify_all();
        }
        drop(st);
    }

    fn call(&self, worker: u32, msg: SchedMessage) -> Result<SchedResponse, SimError> {
        *self.state.lock().messages.entry(msg.kind()).or_default() += 1;
        Ok(self.reg.call(worker, msg)?)
    }

    fn control(
        &self,
        registry: &Registry,
        at: u64,
        policy: Arc<dyn SchedulerPolicy>,
    ) -> Option<Result<UpgradeReport, String>> {
        loop {
            let st = self.state.lock();
            if st.done {
                return None;
            }
            drop(st);
            let now = self.now();
            if now >= at {
                break;
            }
            thread::sleep(self.to_wall(at - now).min(MAX_NAP));
        }
        let res = registry.live_upgrade(POLICY_ID, policy, false).map_err(|e| e.to_string());
        let mut st = self.state.lock();
        *st.messages.entry(MessageKind::ReregisterPrep).or_default() += 1;
        *st.messages.entry(MessageKind::ReregisterInit).or_default() += 1;
        if res.is_err() {
            st.counters.upgrade_failures += 1;
        }
        Some(res)
    }

    fn worker(&self, c: usize) -> Result<(), SimError> {
        let res = self.worker_loop(c);
        if res.is_err() {
            self.finish();
        }
        res
    }

    fn worker_loop(&self, c: usize) -> Result<(), SimError> {
        let core = CoreId(c as u32);
        loop {
            let mut work = Work::default();
            let dispatch;
            {
                let mut st = self.state.lock();
                if st.done {
                    return Ok(());
                }
                let now = self.now();
                if self.limit.is_some_and(|l| now >= l) || (self.limit.is_none() && st.live == 0) {
                    st.done = true;
                    st.end_ns = now.max(st.end_ns);
                    for b in &self.bells {
                        b.notify_all();
                    }
                    return Ok(());
                }
                self.collect(&mut st, c, now, &mut work);
                dispatch = st.cores[c].dispatch;
                if work.owed.is_empty() && work.wakes.is_empty() && work.arrivals.is_empty() && !dispatch {
                    let wait = self.next_deadline(&st, c).saturating_sub(now);
                    let nap = self.to_wall(wait.max(1)).min(MAX_NAP);
                    self.bells[c].wait_for(&mut st, nap);
                    continue;
                }
            }
            if !work.owed.is_empty() || dispatch {
                let gate = self.gates[c].lock();
                for owed in work.owed.drain(..) {
                    self.pay(core, owed)?;
                }
                self.dispatch(c, &gate, &mut work)?;
            }
            for task in std::mem::take(&mut work.arrivals) {
                self.place(core, task)?;
            }
            while let Some((task, waker)) = work.wakes.pop() {
                self.wake(core, task, waker)?;
            }
        }
    }

    fn next_deadline(&self, st: &State, c: usize) -> u64 {
        let core = &st.cores[c];
        let mut t = core.next_tick;
        if let Some(x) = core.timer {
            t = t.min(x);
        }
        if let Some(x) = core.current.and_then(|r| r.until) {
            t = t.min(x);
        }
        let n = self.cfg.num_cores as u64;
        for &(at, task) in &st.alarms {
            if task.0 % n == c as u64 {
                t = t.min(at);
            }
        }
        t
    }

    /// Locked pass over this core's due events.
    fn collect(&self, st: &mut State, c: usize, now: u64, work: &mut Work) {
        let n = self.cfg.num_cores as u64;
        let mut i = 0;
        while i < st.alarms.len() {
            let (at, task) = st.alarms[i];
            if at <= now && task.0 % n == c as u64 {
                st.alarms.swap_remove(i);
                if st.t(task).state == TState::Pending {
                    work.arrivals.push(task);
                } else {
                    work.wakes.push((task, None));
                }
            } else {
                i += 1;
            }
        }
        if let Some(run) = st.cores[c].current {
            if let Some(u) = run.until.filter(|&u| u <= now) {
                // Charge exactly the compute; the lag until this worker
                // noticed counts as idle.
                st.settle(c, u);
                if let Some(r) = &mut st.cores[c].current {
                    r.since = now;
                }
                let t = st.t(run.task);
                t.remaining = None;
                t.cursor.advance();
                self.run_steps(st, c, now, work);
            }
        }
        let p = self.cfg.tick_period_ns;
        let tick_due = st.cores[c].next_tick <= now;
        if tick_due {
            st.cores[c].next_tick = (now / p + 1) * p;
        }
        let timer_due = st.cores[c].timer.is_some_and(|t| t <= now);
        if timer_due {
            st.cores[c].timer = None;
        }
        if tick_due || timer_due {
            match st.cores[c].current {
                Some(run) if !st.cores[c].preempt => {
                    st.settle(c, now);
                    let delta = std::mem::take(&mut st.t(run.task).unreported);
                    work.owed.push(Owed::Tick { task: run.task, delta });
                }
                Some(_) => {}
                None => st.cores[c].dispatch = true,
            }
        }
    }

    /// Executes the running task's steps until it computes, blocks or exits.
    fn run_steps(&self, st: &mut State, c: usize, now: u64, work: &mut Work) {
        let core = CoreId(c as u32);
        let mut instant = 0u32;
        loop {
            let Some(run) = st.cores[c].current else {
                return;
            };
            let id = run.task;
            let t = st.t(id);
            let step = t.cursor.step(&t.spec.program).cloned();
            match step {
                None | Some(Step::Exit) => return self.leave(st, c, now, true, work),
                Some(Step::Compute(ns)) => {
                    let rem = *t.remaining.get_or_insert(ns);
                    if rem > 0 {
                        st.cores[c].current = Some(Running { until: Some(now + rem), ..run });
                        return;
                    }
                    t.remaining = None;
                    t.cursor.advance();
                }
                Some(Step::Signal(ev)) => {
                    t.cursor.advance();
                    if let Some(waiter) = st.sync.signal(ev) {
                        work.wakes.push((waiter, Some(core)));
                    }
                }
                Some(Step::Hint(_)) => {
                    t.cursor.advance();
                    st.counters.hints_full += 1;
                }
                Some(Step::Block(ev)) => {
                    t.cursor.advance();
                    if !st.sync.try_take(ev) {
                        st.sync.wait(ev, id);
                        return self.leave(st, c, now, false, work);
                    }
                }
                Some(Step::Sleep(ns)) => {
                    t.cursor.advance();
                    let n = self.cfg.num_cores as u64;
                    // Alarms are owned by core `id % n`; keep that core's
                    // nap short enough to notice.
                    st.alarms.push((now + ns, id));
                    self.bells[(id.0 % n) as usize].notify_one();
                    return self.leave(st, c, now, false, work);
                }
                Some(Step::Yield) => {
                    t.cursor.advance();
                    st.cores[c].preempt = true;
                    st.cores[c].dispatch = true;
                    st.cores[c].current = Some(Running { until: None, ..run });
                    return;
                }
                Some(Step::Migrate(to)) => {
                    t.cursor.advance();
                    t.pinned = Some(CoreId(to.min(self.cfg.num_cores - 1)));
                    self.leave(st, c, now, false, work);
                    work.wakes.push((id, None));
                    return;
                }
            }
            instant += 1;
            if instant > RUNAWAY_STEPS {
                st.counters.runaway += 1;
                return self.leave(st, c, now, true, work);
            }
        }
    }

    fn leave(&self, st: &mut State, c: usize, now: u64, exit: bool, work: &mut Work) {
        let core = CoreId(c as u32);
        st.settle(c, now);
        let run = st.cores[c].current.take().expect("a running task");
        st.cores[c].dispatch = true;
        st.cores[c].preempt = false;
        st.cores[c].timer = None;
        let t = st.t(run.task);
        let delta = std::mem::take(&mut t.unreported);
        if exit {
            t.state = TState::Dead;
            t.report.completed_at = Some(now);
            st.live -= 1;
            self.reg.detach(run.task);
            st.record(TraceEntry::Exit { at: now, core, task: run.task });
            work.owed.push(Owed::Dead { task: run.task, delta });
        } else {
            t.state = TState::Blocked;
            st.record(TraceEntry::Block { at: now, core, task: run.task });
            work.owed.push(Owed::Blocked { task: run.task, delta });
        }
    }

    fn pay(&self, core: CoreId, owed: Owed) -> Result<(), SimError> {
        match owed {
            Owed::Blocked { task, delta } => {
                self.call(core.0, SchedMessage::TaskBlocked { task, core, runtime_delta_ns: delta })?;
            }
            Owed::Dead { task, delta } => {
                self.call(core.0, SchedMessage::TaskDead { task, core, runtime_delta_ns: delta })?;
            }
            Owed::Tick { task, delta } => {
                let msg = SchedMessage::TaskTick { core, task, runtime_delta_ns: delta };
                let SchedResponse::Tick(d) = self.call(core.0, msg)? else {
                    unreachable!("task_tick answers with a decision")
                };
                let mut st = self.state.lock();
                let now = self.now();
                let c = &mut st.cores[core.index()];
                if c.current.is_some_and(|r| r.task == task) {
                    if d.preempt {
                        c.preempt = true;
                        c.dispatch = true;
                    } else if let Some(ns) = d.timer_ns {
                        c.timer = Some(now + ns);
                    }
                }
            }
        }
        Ok(())
    }

    fn select(&self, worker: u32, req: SelectRq) -> Result<CoreId, SimError> {
        let SchedResponse::Core(core) = self.call(worker, SchedMessage::SelectTaskRq(req))? else {
            unreachable!("select_task_rq answers with a core")
        };
        if core.0 >= self.cfg.num_cores {
            self.state.lock().counters.bad_select += 1;
            return Ok(req.pinned.unwrap_or(CoreId(0)));
        }
        Ok(core)
    }

    fn place(&self, from: CoreId, task: TaskId) -> Result<(), SimError> {
        let (attrs, req) = {
            let mut st = self.state.lock();
            let t = st.t(task);
            let attrs = TaskAttrs { nice: t.spec.nice, group: t.spec.group, pinned: t.spec.pinned };
            (attrs, SelectRq { task, group: attrs.group, prev_core: None, waker_core: None, pinned: attrs.pinned })
        };
        self.reg.attach(task)?;
        let core = self.select(from.0, req)?;
        let _gate = self.gates[core.index()].lock();
        let token = {
            let mut st = self.state.lock();
            let now = self.now();
            let tok = st.tokens.issue_token(task, core)?;
            st.record(TraceEntry::Issue { at: now, task, core, serial: tok.serial() });
            let t = st.t(task);
            t.state = TState::Runnable(core);
            t.waiting = Some((now, WaitCause::Spawn));
            t.report.spawned_at = now;
            tok
        };
        self.call(from.0, SchedMessage::TaskNew { task, attrs, token })?;
        self.kick(core);
        Ok(())
    }

    fn wake(&self, from: CoreId, task: TaskId, waker: Option<CoreId>) -> Result<(), SimError> {
        let req = {
            let mut st = self.state.lock();
            let t = st.t(task);
            SelectRq { task, group: t.spec.group, prev_core: t.last_core, waker_core: waker, pinned: t.pinned }
        };
        let core = self.select(from.0, req)?;
        let _gate = self.gates[core.index()].lock();
        let token = {
            let mut st = self.state.lock();
            let now = self.now();
            let tok = st.tokens.issue_token(task, core)?;
            st.record(TraceEntry::Issue { at: now, task, core, serial: tok.serial() });
            let t = st.t(task);
            t.state = TState::Runnable(core);
            t.waiting = Some((now, WaitCause::Wake));
            tok
        };
        self.call(from.0, SchedMessage::TaskWakeup { task, token })?;
        self.kick(core);
        Ok(())
    }

    fn kick(&self, core: CoreId) {
        let mut st = self.state.lock();
        let c = &mut st.cores[core.index()];
        if c.current.is_none() {
            c.dispatch = true;
            self.bells[core.index()].notify_one();
        }
    }

    /// Runs with this core's gate held.
    fn dispatch(&self, c: usize, _gate: &MutexGuard<'_, ()>, work: &mut Work) -> Result<(), SimError> {
        let core = CoreId(c as u32);
        loop {
            let (current, delta, prev, busy) = {
                let mut st = self.state.lock();
                let now = self.now();
                let cs = &mut st.cores[c];
                if !cs.dispatch {
                    return Ok(());
                }
                cs.dispatch = false;
                let preempt = std::mem::take(&mut cs.preempt);
                match cs.current {
                    Some(_) if !preempt => return Ok(()),
                    Some(run) => {
                        st.settle(c, now);
                        st.cores[c].current = None;
                        st.cores[c].timer = None;
                        let tok = st.tokens.issue_token(run.task, core)?;
                        st.record(TraceEntry::Issue { at: now, task: run.task, core, serial: tok.serial() });
                        st.record(TraceEntry::Preempt { at: now, core, task: run.task });
                        let t = st.t(run.task);
                        t.state = TState::Runnable(core);
                        t.waiting = Some((now, WaitCause::Requeue));
                        let delta = std::mem::take(&mut t.unreported);
                        (Some(tok), delta, Some(run.task), true)
                    }
                    None => (None, 0, None, false),
                }
            };
            self.balance(core, busy)?;
            let mut current = current;
            let mut delta = delta;
            let mut errs = 0;
            let picked = loop {
                self.state.lock().counters.decisions += 1;
                let msg = SchedMessage::PickNextTask { core, current: current.take(), runtime_delta_ns: delta };
                delta = 0;
                let SchedResponse::Pick(p) = self.call(core.0, msg)? else {
                    unreachable!("pick_next_task answers with a pick")
                };
                let Some(tok) = p.token else {
                    break None;
                };
                let (task, serial) = (tok.task(), tok.serial());
                let mut st = self.state.lock();
                let bad = match st.tokens.consume_token(tok, core) {
                    Verdict::Ok => {
                        if st.t(task).state == TState::Runnable(core) {
                            break Some((task, serial, p.timer_ns));
                        }
                        st.inv.invalid_dispatches += 1;
                        break None;
                    }
                    Verdict::WrongCore(t) | Verdict::Stale(t) => t,
                };
                let now = self.now();
                st.counters.rejections += 1;
                st.counters.pnt_err_rejections += 1;
                st.record(TraceEntry::Reject { at: now, core, task, serial });
                st.record(TraceEntry::PntErr { at: now, core, task, serial });
                drop(st);
                self.call(core.0, SchedMessage::PntErr { core, token: bad })?;
                errs += 1;
                if errs > MAX_PNT_ERRS {
                    self.state.lock().counters.livelock_guards += 1;
                    break None;
                }
            };
            let mut st = self.state.lock();
            let now = self.now();
            let Some((task, serial, timer)) = picked else {
                st.record(TraceEntry::Idle { at: now, core });
                return Ok(());
            };
            st.cores[c].current = Some(Running { task, since: now, until: None });
            st.cores[c].timer = timer.map(|ns| now + ns);
            let t = st.t(task);
            t.state = TState::Running(core);
            t.last_core = Some(core);
            let waited = t.waiting.take();
            if prev != Some(task) {
                t.report.runs += 1;
                t.report.first_run_at.get_or_insert(now);
                let label = t.label;
                if let Some((since, cause)) = waited {
                    st.latencies.push(LatencySample { task, label, cause, ns: now.saturating_sub(since), at: since });
                }
                st.inv.run_transitions += 1;
                st.record(TraceEntry::Dispatch { at: now, core, task, serial });
            }
            self.run_steps(&mut st, c, now, work);
            drop(st);
            for owed in work.owed.drain(..) {
                self.pay(core, owed)?;
            }
        }
    }

    fn balance(&self, core: CoreId, busy: bool) -> Result<(), SimError> {
        let SchedResponse::Balance(mv) = self.call(core.0, SchedMessage::Balance { core, busy })? else {
            unreachable!("balance answers with an optional move")
        };
        let Some(mv) = mv else {
            return Ok(());
        };
        // Holding the source's gate keeps it from picking the task mid-move.
        // If the source is busy the move is declined rather than waited on,
        // since two cores stealing from each other would deadlock.
        let source = (mv.from != core && mv.from.0 < self.cfg.num_cores)
            .then(|| self.gates[mv.from.index()].try_lock())
            .flatten();
        let moved = source.as_ref().and_then(|_| {
            let mut st = self.state.lock();
            let ok = st.tasks.get((mv.task.0 as usize).wrapping_sub(1)).is_some_and(|t| {
                t.state == TState::Runnable(mv.from) && t.pinned.is_none_or(|p| p == core)
            });
            if !ok {
                return None;
            }
            let (_, old) = st.tokens.revoke(mv.task)?;
            let now = self.now();
            st.record(TraceEntry::Revoke { at: now, task: mv.task, serial: old });
            let tok = st.tokens.issue_token(mv.task, core).ok()?;
            st.record(TraceEntry::Issue { at: now, task: mv.task, core, serial: tok.serial() });
            st.t(mv.task).state = TState::Runnable(core);
            st.counters.migrations += 1;
            Some((tok, old))
        });
        let Some((token, old_serial)) = moved else {
            self.state.lock().counters.balance_err += 1;
            self.call(core.0, SchedMessage::BalanceErr { core, task: mv.task, token: None })?;
            return Ok(());
        };
        let msg = SchedMessage::MigrateTaskRq { task: mv.task, from: mv.from, token };
        let SchedResponse::Migrated(back) = self.call(core.0, msg)? else {
            unreachable!("migrate_task_rq answers with the old token")
        };
        drop(source);
        match back {
            Some(old) if old.task() == mv.task && old.serial() == old_serial => {}
            Some(other) => {
                self.state.lock().counters.balance_err += 1;
                self.call(core.0, SchedMessage::BalanceErr { core, task: mv.task, token: Some(other) })?;
            }
            None => self.state.lock().counters.withheld += 1,
        }
        Ok(())
    }

    fn metrics(&self, labels: Vec<String>, upgrades: Vec<UpgradeReport>, upgrade_errors: Vec<String>) -> Metrics {
        let mut st = self.state.lock();
        let end = st.end_ns.max(self.limit.unwrap_or(0).min(self.now()));
        for c in 0..st.cores.len() {
            st.settle(c, end);
        }
        let tasks: Vec<TaskReport> = st.tasks.iter().map(|t| t.report.clone()).collect();
        let core_busy_ns: Vec<u64> = st.cores.iter().map(|c| c.busy_ns).collect();
        let mut inv = st.inv.clone();
        inv.task_runtime_ns = tasks.iter().map(|t| t.runtime_ns).sum();
        inv.core_busy_ns = core_busy_ns.iter().sum();
        inv.latency_samples = st.latencies.len() as u64;
        let digest = st.digest.clone().finalize();
        Metrics {
            end_ns: end,
            num_cores: self.cfg.num_cores,
            tasks,
            labels,
            latencies: st.latencies.clone(),
            messages: st.messages.clone(),
            counters: st.counters.clone(),
            core_busy_ns,
            downstream: Vec::new(),
            upgrades,
            upgrade_errors,
            trace: std::mem::take(&mut st.trace),
            trace_digest: digest.iter().map(|b| format!("{b:02x}")).collect(),
            invariants: inv,
        }
    }
}
