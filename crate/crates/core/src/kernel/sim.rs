//! The virtual-time engine.
//!
//! Events are ordered by `(time, core, kind, insertion)`; events without a
//! core sort after every core. All events sharing a timestamp form one batch,
//! processed in three phases: state changes (which may mark cores for
//! rescheduling), hint delivery, then dispatch of each marked core in index
//! order. Dispatch on a core offers `balance` and `pick_next_task` to each
//! policy class in priority order.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::metrics::{Counters, InvariantReport, LatencySample, Metrics, TaskReport, TraceEntry, WaitCause};
use super::program::{hint_words, Cursor, EventTable, Step};
use super::workload::TaskSpec;
use super::{SimConfig, SimError, MAX_PNT_ERRS};
use crate::api::{
    CoreId, Inspection, MessageKind, Pick, Schedulable, SchedMessage, SchedResponse, SchedulerPolicy, SelectRq,
    TaskAttrs, TaskId, TokenRegistry, Verdict,
};
use crate::hints::{HintDirection, HintError, HintHub, HintReceiver, HintRecord, HintSender, QueueId};
use crate::record::{LockFactory, Recorder, CONTROL_WORKER};
use crate::registry::{Registration, Registry, UpgradeError, UpgradeReport};

/// Consecutive instant steps after which a task is treated as runaway.
const RUNAWAY_STEPS: u32 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    Upgrade(usize),
    Arrival(TaskId),
    Wake { task: TaskId, core: CoreId },
    SleepDone(TaskId),
    ComputeDone { core: CoreId, gen: u64 },
    Timer { core: CoreId, gen: u64 },
    Tick(CoreId),
    Resched(CoreId),
}

impl Ev {
    fn core_key(&self) -> u32 {
        match *self {
            Ev::Wake { core, .. }
            | Ev::ComputeDone { core, .. }
            | Ev::Timer { core, .. }
            | Ev::Tick(core)
            | Ev::Resched(core) => core.0,
            Ev::Upgrade(_) | Ev::Arrival(_) | Ev::SleepDone(_) => u32::MAX,
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Ev::Upgrade(_) => 0,
            Ev::Arrival(_) => 1,
            Ev::Wake { .. } => 2,
            Ev::SleepDone(_) => 3,
            Ev::ComputeDone { .. } => 4,
            Ev::Timer { .. } => 5,
            Ev::Tick(_) => 6,
            Ev::Resched(_) => 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TState {
    New,
    Waking(CoreId),
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
    /// Compute left in the current step, once started.
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
    class: usize,
    since: u64,
}

#[derive(Default)]
struct Core {
    current: Option<Running>,
    marked: bool,
    preempt: bool,
    run_gen: u64,
    timer_gen: u64,
    busy_ns: u64,
    idle: bool,
}

struct Class {
    reg: Arc<Registration>,
    up: BTreeMap<QueueId, HintSender>,
    down: Vec<(QueueId, HintReceiver)>,
}

enum PickOutcome {
    Picked { task: TaskId, serial: u64, timer: Option<u64> },
    Idle,
    Guard,
}

#[derive(Clone, Copy)]
enum WakeCost {
    ByPlacement,
    Remote,
    Free,
}

/// What one [`Sim::step`] processed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventReport {
    pub time: u64,
    pub events: usize,
}

type Observer = Box<dyn FnMut(&TraceEntry) + Send>;

pub struct Sim {
    cfg: SimConfig,
    now: u64,
    seq: u64,
    events: BinaryHeap<Reverse<(u64, u32, u8, u64, Ev)>>,
    registry: Registry,
    locks: LockFactory,
    classes: Vec<Class>,
    hub: HintHub,
    tokens: TokenRegistry,
    tasks: Vec<Task>,
    cores: Vec<Core>,
    sync: EventTable,
    live: usize,
    ticking: bool,
    labels: Vec<String>,
    latencies: Vec<LatencySample>,
    messages: BTreeMap<MessageKind, u64>,
    counters: Counters,
    downstream: Vec<(u64, QueueId, HintRecord)>,
    upgrades: Vec<Option<(usize, Arc<dyn SchedulerPolicy>)>>,
    upgrade_reports: Vec<UpgradeReport>,
    upgrade_errors: Vec<String>,
    trace: Vec<TraceEntry>,
    digest: Sha256,
    observer: Option<Observer>,
    inv: InvariantReport,
}

impl Sim {
    pub fn new(cfg: SimConfig) -> Self {
        Self::build(cfg, Registry::new(), LockFactory::plain())
    }

    /// A simulation whose policy calls and policy locks are all recorded.
    /// Policies must be built from [`Sim::lock_factory`].
    pub fn with_recorder(cfg: SimConfig, recorder: Arc<Recorder>) -> Self {
        let locks = LockFactory::recording(recorder.clone());
        Self::build(cfg, Registry::with_recorder(recorder), locks)
    }

    fn build(cfg: SimConfig, registry: Registry, locks: LockFactory) -> Self {
        let cores = (0..cfg.num_cores).map(|_| Core { idle: true, ..Default::default() }).collect();
        Sim {
            now: 0,
            seq: 0,
            events: BinaryHeap::new(),
            registry,
            locks,
            classes: Vec::new(),
            hub: HintHub::new(),
            tokens: TokenRegistry::new(),
            tasks: Vec::new(),
            cores,
            sync: EventTable::default(),
            live: 0,
            ticking: false,
            labels: Vec::new(),
            latencies: Vec::new(),
            messages: BTreeMap::new(),
            counters: Counters::default(),
            downstream: Vec::new(),
            upgrades: Vec::new(),
            upgrade_reports: Vec::new(),
            upgrade_errors: Vec::new(),
            trace: Vec::new(),
            digest: Sha256::new(),
            observer: None,
            inv: InvariantReport::default(),
            cfg,
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn lock_factory(&self) -> LockFactory {
        self.locks.clone()
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    /// Adds the next-lower-priority policy class and returns its index.
    pub fn add_class(&mut self, policy: Arc<dyn SchedulerPolicy>) -> Result<usize, SimError> {
        let class = self.classes.len();
        let reg = self.registry.register(class as u32 + 1, policy)?;
        self.classes.push(Class { reg, up: BTreeMap::new(), down: Vec::new() });
        Ok(class)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Opens a hint queue for `class`. The simulator keeps the user end:
    /// tasks of the class send on its first up-queue, and records arriving
    /// on down-queues are collected into [`Metrics::downstream`].
    pub fn create_queue(&mut self, class: usize, direction: HintDirection, capacity: u32) -> Result<QueueId, HintError> {
        let c = self.classes.get_mut(class).ok_or(HintError::UnknownPolicy(class as u32 + 1))?;
        c.reg.create_queue(&mut self.hub, direction, capacity).map(|(q, end)| {
            *self.messages.entry(MessageKind::RegisterQueue).or_default() += 1;
            match end {
                crate::hints::UserEnd::Sender(tx) => {
                    c.up.insert(q, tx);
                }
                crate::hints::UserEnd::Receiver(rx) => c.down.push((q, rx)),
            }
            q
        })
    }

    pub fn close_queue(&mut self, queue: QueueId) -> Result<(), HintError> {
        let class = self.class_of_queue(queue).ok_or(HintError::UnknownQueue(queue))?;
        let c = &mut self.classes[class];
        c.reg.close_queue(&mut self.hub, queue)?;
        *self.messages.entry(MessageKind::UnregisterQueue).or_default() += 1;
        c.up.remove(&queue);
        c.down.retain(|(q, _)| *q != queue);
        Ok(())
    }

    fn class_of_queue(&self, queue: QueueId) -> Option<usize> {
        self.hub.policy_of(queue).map(|p| p as usize - 1)
    }

    /// Sends a record on an up-queue as workload code would. It is parsed at
    /// the next safe point.
    pub fn send_hint(&mut self, queue: QueueId, record: &HintRecord) -> Result<(), HintError> {
        let class = self.class_of_queue(queue).ok_or(HintError::UnknownQueue(queue))?;
        let tx = self.classes[class].up.get_mut(&queue).ok_or(HintError::UnknownQueue(queue))?;
        tx.send(record)
    }

    pub fn set_observer(&mut self, observer: Observer) {
        self.observer = Some(observer);
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn running(&self, core: CoreId) -> Option<TaskId> {
        self.cores.get(core.index())?.current.map(|r| r.task)
    }

    pub fn task_spec(&self, task: TaskId) -> Option<&TaskSpec> {
        self.task(task).map(|t| &t.spec)
    }

    pub fn inspect(&self, class: usize) -> Inspection {
        self.classes[class].reg.policy().inspect()
    }

    pub fn policy(&self, class: usize) -> Arc<dyn SchedulerPolicy> {
        self.classes[class].reg.policy()
    }

    /// True once every spawned task has exited.
    pub fn all_done(&self) -> bool {
        self.live == 0
    }

    fn task(&self, id: TaskId) -> Option<&Task> {
        self.tasks.get((id.0 as usize).wrapping_sub(1))
    }

    fn t(&mut self, id: TaskId) -> &mut Task {
        &mut self.tasks[id.0 as usize - 1]
    }

    fn push(&mut self, at: u64, ev: Ev) {
        self.seq += 1;
        self.events.push(Reverse((at, ev.core_key(), ev.rank(), self.seq, ev)));
    }

    fn record(&mut self, entry: TraceEntry) {
        self.digest.update(entry.bytes());
        if let Some(obs) = &mut self.observer {
            obs(&entry);
        }
        if self.cfg.trace {
            self.trace.push(entry);
        }
    }

    fn call(&mut self, class: usize, worker: u32, msg: SchedMessage) -> Result<SchedResponse, SimError> {
        *self.messages.entry(msg.kind()).or_default() += 1;
        Ok(self.classes[class].reg.call(worker, msg)?)
    }

    fn issue(&mut self, task: TaskId, core: CoreId) -> Result<Schedulable, SimError> {
        let tok = self.tokens.issue_token(task, core)?;
        self.record(TraceEntry::Issue { at: self.now, task, core, serial: tok.serial() });
        self.t(task).state = TState::Runnable(core);
        Ok(tok)
    }

    fn label_id(&mut self, label: &str) -> u32 {
        match self.labels.iter().position(|l| l == label) {
            Some(i) => i as u32,
            None => {
                self.labels.push(label.to_string());
                self.labels.len() as u32 - 1
            }
        }
    }

    /// Creates a task. It is placed now, or at its arrival time if later.
    pub fn spawn(&mut self, spec: TaskSpec) -> Result<TaskId, SimError> {
        if spec.class >= self.classes.len() {
            return Err(SimError::Config(format!("task class {} has no policy", spec.class)));
        }
        if spec.pinned.is_some_and(|c| c.0 >= self.cfg.num_cores) {
            return Err(SimError::Config(format!("task pinned to missing core {:?}", spec.pinned)));
        }
        let id = TaskId(self.tasks.len() as u64 + 1);
        let label = self.label_id(&spec.label);
        let report = TaskReport {
            id,
            label: spec.label.clone(),
            class: spec.class,
            nice: spec.nice,
            group: spec.group,
            spawned_at: spec.arrival_ns.max(self.now),
            first_run_at: None,
            completed_at: None,
            runtime_ns: 0,
            runs: 0,
        };
        let arrival = spec.arrival_ns;
        self.tasks.push(Task {
            pinned: spec.pinned,
            spec,
            label,
            state: TState::New,
            cursor: Cursor::default(),
            remaining: None,
            unreported: 0,
            last_core: None,
            waiting: None,
            report,
        });
        self.live += 1;
        self.start_ticks();
        if arrival > self.now {
            self.push(arrival, Ev::Arrival(id));
        } else {
            self.place_new(id)?;
        }
        Ok(id)
    }

    fn start_ticks(&mut self) {
        if self.ticking || self.cfg.tick_period_ns == 0 {
            return;
        }
        self.ticking = true;
        let p = self.cfg.tick_period_ns;
        let next = (self.now / p + 1) * p;
        for c in 0..self.cfg.num_cores {
            self.push(next, Ev::Tick(CoreId(c)));
        }
    }

    fn place_new(&mut self, id: TaskId) -> Result<(), SimError> {
        let t = &self.tasks[id.0 as usize - 1];
        let (class, attrs) =
            (t.spec.class, TaskAttrs { nice: t.spec.nice, group: t.spec.group, pinned: t.spec.pinned });
        self.classes[class].reg.attach(id)?;
        let req = SelectRq { task: id, group: attrs.group, prev_core: None, waker_core: None, pinned: attrs.pinned };
        let core = self.select(class, CONTROL_WORKER, req)?;
        let token = self.issue(id, core)?;
        let now = self.now;
        let t = self.t(id);
        t.waiting = Some((now, WaitCause::Spawn));
        t.report.spawned_at = now;
        self.call(class, core.0, SchedMessage::TaskNew { task: id, attrs, token })?;
        self.on_enqueue(core, class);
        Ok(())
    }

    fn select(&mut self, class: usize, worker: u32, req: SelectRq) -> Result<CoreId, SimError> {
        let SchedResponse::Core(core) = self.call(class, worker, SchedMessage::SelectTaskRq(req))? else {
            unreachable!("select_task_rq answers with a core")
        };
        if core.0 >= self.cfg.num_cores {
            self.counters.bad_select += 1;
            return Ok(req.pinned.unwrap_or(CoreId(0)));
        }
        Ok(core)
    }

    fn on_enqueue(&mut self, core: CoreId, class: usize) {
        let c = &mut self.cores[core.index()];
        match c.current {
            None => c.marked = true,
            Some(r) if r.class > class => {
                c.marked = true;
                c.preempt = true;
            }
            Some(_) => {}
        }
    }

    fn mark(&mut self, core: usize, preempt: bool) {
        let c = &mut self.cores[core];
        c.marked = true;
        c.preempt |= preempt;
    }

    /// Charges the running task on `core` for time since it was last charged.
    fn settle(&mut self, core: usize) {
        let Some(run) = self.cores[core].current else {
            return;
        };
        let d = self.now - run.since;
        self.cores[core].busy_ns += d;
        self.cores[core].current = Some(Running { since: self.now, ..run });
        let t = self.t(run.task);
        t.report.runtime_ns += d;
        t.unreported += d;
        if let Some(r) = &mut t.remaining {
            *r = r.saturating_sub(d);
        }
    }

    fn take_delta(&mut self, task: TaskId) -> u64 {
        std::mem::take(&mut self.t(task).unreported)
    }

    pub fn schedule_upgrade(&mut self, at: u64, class: usize, policy: Arc<dyn SchedulerPolicy>) {
        self.upgrades.push(Some((class, policy)));
        let idx = self.upgrades.len() - 1;
        self.push(at, Ev::Upgrade(idx));
    }

    /// Swaps the instance serving `class` right away.
    pub fn upgrade_now(&mut self, class: usize, policy: Arc<dyn SchedulerPolicy>) -> Result<UpgradeReport, UpgradeError> {
        let id = class as u32 + 1;
        let queues_open = !self.hub.queues_of(id).is_empty();
        let res = self.registry.live_upgrade(id, policy, queues_open);
        *self.messages.entry(MessageKind::ReregisterPrep).or_default() += 1;
        *self.messages.entry(MessageKind::ReregisterInit).or_default() += 1;
        match &res {
            Ok(r) => self.upgrade_reports.push(r.clone()),
            Err(e) => {
                self.counters.upgrade_failures += 1;
                self.upgrade_errors.push(e.to_string());
            }
        }
        res
    }

    /// Processes the next batch of simultaneous events.
    pub fn step(&mut self) -> Result<Option<EventReport>, SimError> {
        if self.cores.iter().any(|c| c.marked) {
            // Work placed from outside a batch, e.g. by `spawn`.
            self.deliver_hints()?;
            self.dispatch_marked()?;
            return Ok(Some(EventReport { time: self.now, events: 0 }));
        }
        let Some(&Reverse((time, ..))) = self.events.peek() else {
            return Ok(None);
        };
        self.now = time;
        let mut n = 0;
        while let Some(&Reverse((t, _, _, _, ev))) = self.events.peek() {
            if t != time {
                break;
            }
            self.events.pop();
            self.handle(ev)?;
            n += 1;
        }
        self.deliver_hints()?;
        self.dispatch_marked()?;
        Ok(Some(EventReport { time, events: n }))
    }

    /// Runs until every task has exited or virtual time would pass `limit`.
    pub fn run_until(&mut self, limit: Option<u64>) -> Result<(), SimError> {
        loop {
            if self.cores.iter().any(|c| c.marked) {
                self.step()?;
            }
            if self.all_done() && limit.is_none() {
                break;
            }
            let next = match self.events.peek() {
                Some(Reverse((t, ..))) => *t,
                None => break,
            };
            if limit.is_some_and(|l| next > l) {
                break;
            }
            self.step()?;
            if self.all_done() && self.events.iter().all(|Reverse((.., ev))| matches!(ev, Ev::Tick(_))) {
                break;
            }
        }
        if let Some(l) = limit {
            self.now = self.now.max(l);
        }
        for c in 0..self.cores.len() {
            self.settle(c);
        }
        Ok(())
    }

    pub fn run_for(&mut self, ns: u64) -> Result<(), SimError> {
        self.run_until(Some(self.now + ns))
    }

    fn handle(&mut self, ev: Ev) -> Result<(), SimError> {
        match ev {
            Ev::Upgrade(i) => {
                if let Some((class, policy)) = self.upgrades[i].take() {
                    let _ = self.upgrade_now(class, policy);
                }
            }
            Ev::Arrival(task) => self.place_new(task)?,
            Ev::Wake { task, core } => self.deliver_wake(task, core)?,
            Ev::SleepDone(task) => {
                if self.task(task).is_some_and(|t| t.state == TState::Blocked) {
                    self.wake(task, None, WakeCost::Free)?;
                }
            }
            Ev::ComputeDone { core, gen } => {
                let c = core.index();
                if self.cores[c].run_gen == gen && self.cores[c].current.is_some() {
                    self.settle(c);
                    let task = self.cores[c].current.unwrap().task;
                    let t = self.t(task);
                    t.remaining = None;
                    t.cursor.advance();
                    self.run_steps(c)?;
                }
            }
            Ev::Timer { core, gen } => {
                if self.cores[core.index()].timer_gen == gen {
                    self.tick(core)?;
                }
            }
            Ev::Tick(core) => {
                if self.all_done() {
                    self.ticking = false;
                } else {
                    self.push(self.now + self.cfg.tick_period_ns, Ev::Tick(core));
                    self.tick(core)?;
                }
            }
            Ev::Resched(core) => self.mark(core.index(), false),
        }
        Ok(())
    }

    fn tick(&mut self, core: CoreId) -> Result<(), SimError> {
        let c = core.index();
        let Some(run) = self.cores[c].current else {
            self.mark(c, false);
            return Ok(());
        };
        if self.cores[c].preempt {
            return Ok(());
        }
        self.settle(c);
        let delta = self.take_delta(run.task);
        let msg = SchedMessage::TaskTick { core, task: run.task, runtime_delta_ns: delta };
        let SchedResponse::Tick(d) = self.call(run.class, core.0, msg)? else {
            unreachable!("task_tick answers with a decision")
        };
        if d.preempt {
            self.mark(c, true);
        } else if let Some(ns) = d.timer_ns {
            self.set_timer(c, ns);
        }
        Ok(())
    }

    fn set_timer(&mut self, c: usize, ns: u64) {
        self.cores[c].timer_gen += 1;
        let gen = self.cores[c].timer_gen;
        self.push(self.now + ns, Ev::Timer { core: CoreId(c as u32), gen });
    }

    fn deliver_hints(&mut self) -> Result<(), SimError> {
        for (policy, queue, records) in self.hub.drain() {
            let class = policy as usize - 1;
            self.counters.hints += records.len() as u64;
            self.call(class, CONTROL_WORKER, SchedMessage::EnterQueue { queue, pending: records.len() as u32 })?;
            for hint in records {
                let SchedResponse::Outbound(out) = self.call(class, CONTROL_WORKER, SchedMessage::ParseHint { queue, hint })?
                else {
                    unreachable!("parse_hint answers with outbound records")
                };
                for (q, rec) in out {
                    if self.hub.push_outbound(q, &rec).is_err() {
                        self.counters.outbound_full += 1;
                    }
                }
            }
        }
        let now = self.now;
        for class in &mut self.classes {
            for (q, rx) in &mut class.down {
                while let Some(rec) = rx.recv() {
                    self.downstream.push((now, *q, rec));
                }
            }
        }
        Ok(())
    }

    fn dispatch_marked(&mut self) -> Result<(), SimError> {
        while let Some(c) = self.cores.iter().position(|c| c.marked) {
            self.cores[c].marked = false;
            self.dispatch(c)?;
        }
        Ok(())
    }

    fn dispatch(&mut self, c: usize) -> Result<(), SimError> {
        let core = CoreId(c as u32);
        let preempt = std::mem::take(&mut self.cores[c].preempt);
        let prev = self.cores[c].current;
        let mut cur: Option<(usize, Schedulable, u64)> = None;
        if let Some(run) = prev {
            if !preempt {
                return Ok(());
            }
            self.settle(c);
            self.cores[c].current = None;
            self.cores[c].run_gen += 1;
            self.cores[c].timer_gen += 1;
            let tok = self.issue(run.task, core)?;
            let delta = self.take_delta(run.task);
            let now = self.now;
            self.t(run.task).waiting = Some((now, WaitCause::Requeue));
            self.record(TraceEntry::Preempt { at: now, core, task: run.task });
            cur = Some((run.class, tok, delta));
        }
        let busy = cur.is_some();
        for class in 0..self.classes.len() {
            self.balance(class, core, busy)?;
            let (current, delta) = match cur.take() {
                Some((k, tok, d)) if k == class => (Some(tok), d),
                other => {
                    cur = other;
                    (None, 0)
                }
            };
            match self.pick_loop(class, core, current, delta)? {
                PickOutcome::Picked { task, serial, timer } => {
                    self.return_lower(core, cur.take())?;
                    return self.start(c, class, task, serial, timer, prev.map(|r| r.task));
                }
                PickOutcome::Idle => {}
                PickOutcome::Guard => {
                    self.return_lower(core, cur.take())?;
                    self.push(self.now + self.cfg.tick_period_ns, Ev::Resched(core));
                    break;
                }
            }
        }
        if !self.cores[c].idle {
            self.cores[c].idle = true;
            self.record(TraceEntry::Idle { at: self.now, core });
        }
        Ok(())
    }

    /// A lower-class task displaced by a higher class gets its token back to
    /// its own policy. Whatever that policy picks instead is refused.
    fn return_lower(&mut self, core: CoreId, cur: Option<(usize, Schedulable, u64)>) -> Result<(), SimError> {
        let Some((class, tok, delta)) = cur else {
            return Ok(());
        };
        let pick = self.pick(class, core, Some(tok), delta)?;
        if let Some(tok) = pick.token {
            self.counters.pnt_err_preempt += 1;
            self.record(TraceEntry::PntErr { at: self.now, core, task: tok.task(), serial: tok.serial() });
            self.call(class, core.0, SchedMessage::PntErr { core, token: tok })?;
        }
        Ok(())
    }

    fn pick(&mut self, class: usize, core: CoreId, current: Option<Schedulable>, delta: u64) -> Result<Pick, SimError> {
        self.counters.decisions += 1;
        let msg = SchedMessage::PickNextTask { core, current, runtime_delta_ns: delta };
        let SchedResponse::Pick(p) = self.call(class, core.0, msg)? else {
            unreachable!("pick_next_task answers with a pick")
        };
        Ok(p)
    }

    fn pick_loop(
        &mut self,
        class: usize,
        core: CoreId,
        mut current: Option<Schedulable>,
        delta: u64,
    ) -> Result<PickOutcome, SimError> {
        let mut errs = 0;
        let mut delta = delta;
        loop {
            let pick = self.pick(class, core, current.take(), std::mem::take(&mut delta))?;
            let Some(tok) = pick.token else {
                return Ok(PickOutcome::Idle);
            };
            let (task, serial) = (tok.task(), tok.serial());
            let rejected = match self.tokens.consume_token(tok, core) {
                Verdict::Ok => {
                    let runnable_here = self.task(task).is_some_and(|t| t.state == TState::Runnable(core));
                    if runnable_here && self.tasks[task.0 as usize - 1].spec.class == class {
                        return Ok(PickOutcome::Picked { task, serial, timer: pick.timer_ns });
                    }
                    // A live serial always names a runnable task; getting here
                    // means the framework's own bookkeeping broke.
                    self.inv.invalid_dispatches += 1;
                    return Ok(PickOutcome::Idle);
                }
                Verdict::WrongCore(t) | Verdict::Stale(t) => t,
            };
            self.counters.rejections += 1;
            self.record(TraceEntry::Reject { at: self.now, core, task, serial });
            self.counters.pnt_err_rejections += 1;
            self.record(TraceEntry::PntErr { at: self.now, core, task, serial });
            self.call(class, core.0, SchedMessage::PntErr { core, token: rejected })?;
            errs += 1;
            if errs > MAX_PNT_ERRS {
                self.counters.livelock_guards += 1;
                log::warn!("livelock guard on {core}: {errs} rejected picks in one dispatch");
                return Ok(PickOutcome::Guard);
            }
        }
    }

    fn balance(&mut self, class: usize, core: CoreId, busy: bool) -> Result<(), SimError> {
        let SchedResponse::Balance(mv) = self.call(class, core.0, SchedMessage::Balance { core, busy })? else {
            unreachable!("balance answers with an optional move")
        };
        let Some(mv) = mv else {
            return Ok(());
        };
        let valid = mv.from != core
            && self.task(mv.task).is_some_and(|t| {
                t.spec.class == class
                    && t.state == TState::Runnable(mv.from)
                    && t.pinned.is_none_or(|p| p == core)
            });
        if !valid {
            self.counters.balance_err += 1;
            let msg = SchedMessage::BalanceErr { core, task: mv.task, token: None };
            self.call(class, core.0, msg)?;
            return Ok(());
        }
        let (_, old_serial) = self.tokens.revoke(mv.task).expect("runnable task has a live token");
        self.record(TraceEntry::Revoke { at: self.now, task: mv.task, serial: old_serial });
        let token = self.issue(mv.task, core)?;
        self.counters.migrations += 1;
        let msg = SchedMessage::MigrateTaskRq { task: mv.task, from: mv.from, token };
        let SchedResponse::Migrated(back) = self.call(class, core.0, msg)? else {
            unreachable!("migrate_task_rq answers with the old token")
        };
        match back {
            Some(old) if old.task() == mv.task && old.serial() == old_serial => {}
            Some(other) => {
                self.counters.balance_err += 1;
                let msg = SchedMessage::BalanceErr { core, task: mv.task, token: Some(other) };
                self.call(class, core.0, msg)?;
            }
            None => self.counters.withheld += 1,
        }
        Ok(())
    }

    fn start(
        &mut self,
        c: usize,
        class: usize,
        task: TaskId,
        serial: u64,
        timer: Option<u64>,
        prev: Option<TaskId>,
    ) -> Result<(), SimError> {
        let core = CoreId(c as u32);
        let now = self.now;
        let resumed = prev == Some(task);
        self.cores[c].current = Some(Running { task, class, since: now });
        self.cores[c].idle = false;
        self.cores[c].run_gen += 1;
        match timer {
            Some(ns) => self.set_timer(c, ns),
            None => self.cores[c].timer_gen += 1,
        }
        let t = self.t(task);
        t.state = TState::Running(core);
        t.last_core = Some(core);
        let waited = t.waiting.take();
        if !resumed {
            t.report.runs += 1;
            t.report.first_run_at.get_or_insert(now);
            let label = t.label;
            if let Some((since, cause)) = waited {
                self.latencies.push(LatencySample { task, label, cause, ns: now - since, at: since });
            }
            self.inv.run_transitions += 1;
            self.record(TraceEntry::Dispatch { at: now, core, task, serial });
        }
        self.run_steps(c)
    }

    /// Executes the running task's steps until it computes, blocks or exits.
    fn run_steps(&mut self, c: usize) -> Result<(), SimError> {
        let core = CoreId(c as u32);
        let mut instant = 0u32;
        loop {
            let Some(run) = self.cores[c].current else {
                return Ok(());
            };
            let id = run.task;
            let t = &mut self.tasks[id.0 as usize - 1];
            let step = t.cursor.step(&t.spec.program).cloned();
            match step {
                None | Some(Step::Exit) => return self.exit(c),
                Some(Step::Compute(ns)) => {
                    let rem = *t.remaining.get_or_insert(ns);
                    if rem > 0 {
                        let gen = self.cores[c].run_gen;
                        self.push(self.now + rem, Ev::ComputeDone { core, gen });
                        return Ok(());
                    }
                    t.remaining = None;
                    t.cursor.advance();
                }
                Some(Step::Signal(ev)) => {
                    t.cursor.advance();
                    if let Some(waiter) = self.sync.signal(ev) {
                        self.wake(waiter, Some(core), WakeCost::ByPlacement)?;
                    }
                }
                Some(Step::Hint(words)) => {
                    t.cursor.advance();
                    let (class, group) = (t.spec.class, t.spec.group);
                    let rec = HintRecord::from_words(&hint_words(&words, id, group));
                    match self.classes[class].up.values_mut().next() {
                        Some(tx) => {
                            if tx.send(&rec).is_err() {
                                self.counters.hints_full += 1;
                            }
                        }
                        None => self.counters.hints_full += 1,
                    }
                }
                Some(Step::Block(ev)) => {
                    t.cursor.advance();
                    if !self.sync.try_take(ev) {
                        self.sync.wait(ev, id);
                        return self.block(c);
                    }
                    instant = 0;
                    continue;
                }
                Some(Step::Sleep(ns)) => {
                    t.cursor.advance();
                    self.block(c)?;
                    self.push(self.now + ns, Ev::SleepDone(id));
                    return Ok(());
                }
                Some(Step::Yield) => {
                    t.cursor.advance();
                    self.mark(c, true);
                    return Ok(());
                }
                Some(Step::Migrate(to)) => {
                    t.cursor.advance();
                    if to >= self.cfg.num_cores {
                        return Err(SimError::Config(format!("{id} migrates to missing core {to}")));
                    }
                    t.pinned = Some(CoreId(to));
                    self.block(c)?;
                    return self.wake(id, None, WakeCost::Remote);
                }
            }
            instant += 1;
            if instant > RUNAWAY_STEPS {
                self.counters.runaway += 1;
                log::warn!("{id} ran {RUNAWAY_STEPS} steps without using the CPU; stopping it");
                return self.exit(c);
            }
        }
    }

    fn leave_core(&mut self, c: usize) -> Running {
        self.settle(c);
        let run = self.cores[c].current.take().expect("a running task");
        self.cores[c].run_gen += 1;
        self.cores[c].timer_gen += 1;
        self.mark(c, false);
        run
    }

    fn block(&mut self, c: usize) -> Result<(), SimError> {
        let core = CoreId(c as u32);
        let run = self.leave_core(c);
        let delta = self.take_delta(run.task);
        self.t(run.task).state = TState::Blocked;
        self.record(TraceEntry::Block { at: self.now, core, task: run.task });
        let msg = SchedMessage::TaskBlocked { task: run.task, core, runtime_delta_ns: delta };
        self.call(run.class, core.0, msg)?;
        Ok(())
    }

    fn exit(&mut self, c: usize) -> Result<(), SimError> {
        let core = CoreId(c as u32);
        let run = self.leave_core(c);
        let delta = self.take_delta(run.task);
        let now = self.now;
        let t = self.t(run.task);
        t.state = TState::Dead;
        t.report.completed_at = Some(now);
        self.live -= 1;
        self.classes[run.class].reg.detach(run.task);
        self.record(TraceEntry::Exit { at: now, core, task: run.task });
        let msg = SchedMessage::TaskDead { task: run.task, core, runtime_delta_ns: delta };
        self.call(run.class, core.0, msg)?;
        Ok(())
    }

    /// Places a blocked task and delivers its wakeup after the wake cost.
    fn wake(&mut self, id: TaskId, waker: Option<CoreId>, cost: WakeCost) -> Result<(), SimError> {
        let t = &self.tasks[id.0 as usize - 1];
        let class = t.spec.class;
        let req =
            SelectRq { task: id, group: t.spec.group, prev_core: t.last_core, waker_core: waker, pinned: t.pinned };
        let worker = waker.map_or(CONTROL_WORKER, |c| c.0);
        let core = self.select(class, worker, req)?;
        let delay = match cost {
            WakeCost::Free => 0,
            WakeCost::Remote => self.cfg.wake_cost_remote_ns,
            WakeCost::ByPlacement if waker == Some(core) => self.cfg.wake_cost_local_ns,
            WakeCost::ByPlacement => self.cfg.wake_cost_remote_ns,
        };
        let now = self.now;
        let t = self.t(id);
        t.state = TState::Waking(core);
        t.waiting = Some((now, WaitCause::Wake));
        if delay == 0 {
            self.deliver_wake(id, core)
        } else {
            self.push(now + delay, Ev::Wake { task: id, core });
            Ok(())
        }
    }

    fn deliver_wake(&mut self, id: TaskId, core: CoreId) -> Result<(), SimError> {
        let class = self.tasks[id.0 as usize - 1].spec.class;
        let token = self.issue(id, core)?;
        self.call(class, core.0, SchedMessage::TaskWakeup { task: id, token })?;
        self.on_enqueue(core, class);
        Ok(())
    }

    /// A snapshot of everything measured so far.
    pub fn metrics(&self) -> Metrics {
        let tasks: Vec<TaskReport> = self.tasks.iter().map(|t| t.report.clone()).collect();
        let core_busy_ns: Vec<u64> = self.cores.iter().map(|c| c.busy_ns).collect();
        let mut inv = self.inv.clone();
        inv.task_runtime_ns = tasks.iter().map(|t| t.runtime_ns).sum();
        inv.core_busy_ns = core_busy_ns.iter().sum();
        inv.latency_samples = self.latencies.len() as u64;
        let digest = self.digest.clone().finalize();
        Metrics {
            end_ns: self.now,
            num_cores: self.cfg.num_cores,
            tasks,
            labels: self.labels.clone(),
            latencies: self.latencies.clone(),
            messages: self.messages.clone(),
            counters: self.counters.clone(),
            core_busy_ns,
            downstream: self.downstream.clone(),
            upgrades: self.upgrade_reports.clone(),
            upgrade_errors: self.upgrade_errors.clone(),
            trace: self.trace.clone(),
            trace_digest: digest.iter().map(|b| format!("{b:02x}")).collect(),
            invariants: inv,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Program;
    use crate::policies::{build, PolicyKind, PolicyParams};

    fn sim(n: u32, kind: PolicyKind) -> Sim {
        let mut s = Sim::new(SimConfig::new(n).traced());
        let p = build(kind, PolicyParams::new(n, 1), &s.lock_factory());
        s.add_class(p).unwrap();
        s
    }

    #[test]
    fn two_spinners_share_one_core() {
        let mut s = sim(1, PolicyKind::Wfq);
        let spin = Program::once(vec![Step::Compute(100_000_000)]);
        let a = s.spawn(TaskSpec::new("a", spin.clone())).unwrap();
        let b = s.spawn(TaskSpec::new("b", spin)).unwrap();
        s.run_for(100_000_000).unwrap();
        let m = s.metrics();
        let (ra, rb) = (m.task(a).unwrap().runtime_ns, m.task(b).unwrap().runtime_ns);
        assert_eq!(ra + rb, 100_000_000);
        assert!(ra.abs_diff(rb) <= 6_000_000, "{ra} vs {rb}");
        assert!(m.violations().is_empty(), "{:?}", m.violations());
    }

    #[test]
    fn pingpong_completes_with_wake_costs() {
        let mut s = sim(2, PolicyKind::Wfq);
        let ping = Program::repeated(vec![], vec![Step::Signal(1), Step::Block(2)], 100);
        let pong = Program::repeated(vec![], vec![Step::Block(1), Step::Signal(2)], 100);
        s.spawn(TaskSpec::new("ping", ping)).unwrap();
        s.spawn(TaskSpec::new("pong", pong)).unwrap();
        s.run_until(None).unwrap();
        assert!(s.all_done());
        let m = s.metrics();
        assert_eq!(m.wake_latencies(Some("ping"), 0).len(), 101);
        assert!(m.violations().is_empty(), "{:?}", m.violations());
    }

    #[test]
    fn runs_are_deterministic() {
        let run = || {
            let mut s = sim(3, PolicyKind::Wfq);
            for i in 0..6 {
                let p = Program::repeated(vec![], vec![Step::Compute(300_000 + i * 1000), Step::Sleep(200_000)], 20);
                s.spawn(TaskSpec::new("w", p)).unwrap();
            }
            s.run_until(None).unwrap();
            s.metrics().trace_digest
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sleeping_task_exits_after_its_sleep() {
        let mut s = sim(1, PolicyKind::Shinjuku);
        let id = s.spawn(TaskSpec::new("s", Program::once(vec![Step::Sleep(5_000), Step::Compute(1_000)]))).unwrap();
        s.run_until(None).unwrap();
        assert_eq!(s.metrics().task(id).unwrap().completed_at, Some(6_000));
    }

    #[test]
    fn higher_class_preempts_lower() {
        let mut s = Sim::new(SimConfig::new(1));
        let locks = s.lock_factory();
        let params = PolicyParams::new(1, 1);
        s.add_class(build(PolicyKind::Shinjuku, params, &locks)).unwrap();
        s.add_class(build(PolicyKind::Wfq, params, &locks)).unwrap();
        s.spawn(TaskSpec::new("batch", Program::once(vec![Step::Compute(10_000_000)])).class(1)).unwrap();
        let lc = s.spawn(TaskSpec::new("lc", Program::once(vec![Step::Compute(1_000)])).at(2_000_000)).unwrap();
        s.run_until(None).unwrap();
        let m = s.metrics();
        assert_eq!(m.task(lc).unwrap().completed_at, Some(2_001_000));
        assert!(m.violations().is_empty(), "{:?}", m.violations());
    }
}
