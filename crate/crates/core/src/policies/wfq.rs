//! Weighted fair queuing.
//!
//! Each core keeps its waiting tokens ordered by `(vruntime, task)` and runs
//! the smallest. Runtime is charged as `delta * 1.25^nice`, so a task at
//! nice 0 accrues vruntime at wall speed and higher-priority tasks accrue it
//! slower. A core about to go idle steals the lowest-vruntime unpinned task
//! from the core with the longest waiting queue; there is no other
//! rebalancing and no vruntime renormalization on migration.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::api::{
    BalanceMove, CoreId, Inspection, Pick, PolicyInfo, Schedulable, SchedulerPolicy, SelectRq, TaskAttrs, TaskId,
    TickDecision, UpgradeCapsule,
};
use crate::hints::{HintDirection, HintRecord, QueueId};
use crate::record::{LockFactory, TrackedMutex};

pub const MIN_GRANULARITY_NS: u64 = 750_000;
pub const MIN_PERIOD_NS: u64 = 6_000_000;
pub const WAKE_CLAMP_NS: u64 = 6_000_000;

/// Vruntime charged for `delta_ns` of runtime at `nice`.
pub fn scaled_runtime(delta_ns: u64, nice: i8) -> u64 {
    (delta_ns as f64 * 1.25f64.powi(nice as i32)).round() as u64
}

pub fn period_ns(runnable: u64) -> u64 {
    MIN_PERIOD_NS.max(MIN_GRANULARITY_NS * runnable)
}

/// Time a task may run before yielding to the `runnable - 1` others.
pub fn slice_ns(runnable: u64) -> u64 {
    let n = runnable.max(1);
    (period_ns(n) / n).max(MIN_GRANULARITY_NS)
}

/// `max(old, min - clamp)`; a core with nothing on it leaves `old` alone.
pub fn wake_clamp(old: u64, core_min: Option<u64>) -> u64 {
    match core_min {
        Some(min) => old.max(min.saturating_sub(WAKE_CLAMP_NS)),
        None => old,
    }
}

/// Which of several equally loaded cores `select_task_rq` prefers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieBreak {
    #[default]
    Lowest,
    Highest,
}

#[derive(Debug, Clone)]
pub struct WfqConfig {
    pub num_cores: u32,
    pub version: String,
    pub capsule_format: String,
    pub tie_break: TieBreak,
}

impl WfqConfig {
    pub fn new(num_cores: u32) -> Self {
        WfqConfig {
            num_cores,
            version: "1".into(),
            capsule_format: CAPSULE_FORMAT.into(),
            tie_break: TieBreak::Lowest,
        }
    }
}

pub const CAPSULE_FORMAT: &str = "wfq-state/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TaskEntry {
    vr: u64,
    nice: i8,
    pinned: Option<u32>,
    core: u32,
    /// Serial of the token this policy holds for the task, if any.
    queued: Option<u64>,
}

#[derive(Default)]
struct RunQueue {
    waiting: BTreeMap<(u64, TaskId), Schedulable>,
    current: Option<TaskId>,
    ran_ns: u64,
    wake_preempt: bool,
}

#[derive(Serialize, Deserialize)]
struct CoreState {
    current: Option<TaskId>,
    ran_ns: u64,
    wake_preempt: bool,
}

#[derive(Serialize, Deserialize)]
struct Capsule {
    tasks: BTreeMap<TaskId, TaskEntry>,
    cores: Vec<CoreState>,
}

/// Weighted fair queuing policy.
///
/// Lock order: the task table, then run-queues in ascending core order.
pub struct Wfq {
    cfg: WfqConfig,
    tasks: TrackedMutex<BTreeMap<TaskId, TaskEntry>>,
    rqs: Vec<TrackedMutex<RunQueue>>,
}

impl Wfq {
    pub fn new(cfg: WfqConfig, locks: &LockFactory) -> Self {
        let tasks = locks.mutex(BTreeMap::new());
        let rqs = (0..cfg.num_cores).map(|_| locks.mutex(RunQueue::default())).collect();
        Wfq { cfg, tasks, rqs }
    }

    fn min_vr(rq: &RunQueue, tasks: &BTreeMap<TaskId, TaskEntry>) -> Option<u64> {
        let cur = rq.current.and_then(|t| tasks.get(&t)).map(|e| e.vr);
        let first = rq.waiting.keys().next().map(|&(vr, _)| vr);
        match (cur, first) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    fn enqueue(rq: &mut RunQueue, entry: &mut TaskEntry, token: Schedulable) {
        entry.queued = Some(token.serial());
        entry.core = token.core().0;
        rq.waiting.insert((entry.vr, token.task()), token);
    }

    fn charge(entry: &mut TaskEntry, delta: u64) {
        entry.vr += scaled_runtime(delta, entry.nice);
    }

    fn insert_runnable(&self, task: TaskId, token: Schedulable, vr_of: impl FnOnce(Option<u64>, Option<u64>) -> u64) {
        let mut tasks = self.tasks.lock();
        let mut rq = self.rqs[token.core().index()].lock();
        let min = Self::min_vr(&rq, &tasks);
        let cur_vr = rq.current.and_then(|t| tasks.get(&t)).map(|e| e.vr);
        let Some(entry) = tasks.get_mut(&task) else {
            return;
        };
        entry.vr = vr_of(Some(entry.vr), min);
        if cur_vr.is_some_and(|c| entry.vr < c) {
            rq.wake_preempt = true;
        }
        Self::enqueue(&mut rq, entry, token);
    }

    /// Puts back a token the framework refused, unless a newer one is held.
    fn requeue(&self, token: Schedulable) {
        let mut tasks = self.tasks.lock();
        let Some(entry) = tasks.get_mut(&token.task()) else {
            return;
        };
        if entry.queued.is_some() {
            return;
        }
        let Some(rq) = self.rqs.get(token.core().index()) else {
            return;
        };
        let mut rq = rq.lock();
        if rq.current == Some(token.task()) {
            rq.current = None;
        }
        Self::enqueue(&mut rq, entry, token);
    }

    fn loads(&self) -> Vec<u64> {
        self.rqs
            .iter()
            .map(|rq| {
                let rq = rq.lock();
                rq.waiting.len() as u64 + rq.current.is_some() as u64
            })
            .collect()
    }

    pub fn vruntime(&self, task: TaskId) -> Option<u64> {
        self.tasks.lock().get(&task).map(|e| e.vr)
    }
}

impl SchedulerPolicy for Wfq {
    fn info(&self) -> PolicyInfo {
        PolicyInfo {
            name: "wfq".into(),
            version: self.cfg.version.clone(),
            capsule_format: self.cfg.capsule_format.clone(),
            up_hint_width: 0,
            down_hint_width: 0,
        }
    }

    fn pick_next_task(&self, core: CoreId, current: Option<Schedulable>, runtime_delta_ns: u64) -> Pick {
        let mut tasks = self.tasks.lock();
        let mut rq = self.rqs[core.index()].lock();
        if let Some(tok) = current {
            if let Some(entry) = tasks.get_mut(&tok.task()) {
                Self::charge(entry, runtime_delta_ns);
                Self::enqueue(&mut rq, entry, tok);
            }
        }
        rq.current = None;
        rq.wake_preempt = false;
        rq.ran_ns = 0;
        let Some((_, token)) = rq.waiting.pop_first() else {
            return Pick::idle();
        };
        if let Some(entry) = tasks.get_mut(&token.task()) {
            entry.queued = None;
        }
        rq.current = Some(token.task());
        let others = rq.waiting.len() as u64;
        let pick = Pick::run(token);
        if others > 0 {
            pick.with_timer(slice_ns(others + 1))
        } else {
            pick
        }
    }

    fn pnt_err(&self, _core: CoreId, token: Schedulable) {
        self.requeue(token);
    }

    fn task_new(&self, task: TaskId, attrs: TaskAttrs, token: Schedulable) {
        self.tasks.lock().insert(
            task,
            TaskEntry { vr: 0, nice: attrs.nice, pinned: attrs.pinned.map(|c| c.0), core: token.core().0, queued: None },
        );
        self.insert_runnable(task, token, |_, min| min.unwrap_or(0));
    }

    fn task_wakeup(&self, task: TaskId, token: Schedulable) {
        self.insert_runnable(task, token, |old, min| wake_clamp(old.unwrap_or(0), min));
    }

    fn task_blocked(&self, task: TaskId, core: CoreId, runtime_delta_ns: u64) {
        let mut tasks = self.tasks.lock();
        if let Some(entry) = tasks.get_mut(&task) {
            Self::charge(entry, runtime_delta_ns);
        }
        let mut rq = self.rqs[core.index()].lock();
        if rq.current == Some(task) {
            rq.current = None;
        }
    }

    fn task_dead(&self, task: TaskId, core: CoreId, _runtime_delta_ns: u64) {
        let mut tasks = self.tasks.lock();
        tasks.remove(&task);
        let mut rq = self.rqs[core.index()].lock();
        if rq.current == Some(task) {
            rq.current = None;
        }
    }

    fn task_tick(&self, core: CoreId, task: TaskId, runtime_delta_ns: u64) -> TickDecision {
        let mut tasks = self.tasks.lock();
        if let Some(entry) = tasks.get_mut(&task) {
            Self::charge(entry, runtime_delta_ns);
        }
        let mut rq = self.rqs[core.index()].lock();
        rq.ran_ns += runtime_delta_ns;
        if rq.waiting.is_empty() {
            return TickDecision::default();
        }
        let slice = slice_ns(rq.waiting.len() as u64 + 1);
        if rq.wake_preempt || rq.ran_ns >= slice {
            TickDecision { preempt: true, timer_ns: None }
        } else {
            TickDecision { preempt: false, timer_ns: Some(slice - rq.ran_ns) }
        }
    }

    fn select_task_rq(&self, req: SelectRq) -> CoreId {
        if let Some(e) = self.tasks.lock().get_mut(&req.task) {
            e.pinned = req.pinned.map(|c| c.0);
        }
        if let Some(core) = req.pinned {
            return core;
        }
        let loads = self.loads();
        let min = *loads.iter().min().unwrap_or(&0);
        if let Some(prev) = req.prev_core {
            if loads.get(prev.index()) == Some(&min) {
                return prev;
            }
        }
        let mut tied = loads.iter().enumerate().filter(|(_, &l)| l == min).map(|(i, _)| i as u32);
        let core = match self.cfg.tie_break {
            TieBreak::Lowest => tied.next(),
            TieBreak::Highest => tied.last(),
        };
        CoreId(core.unwrap_or(0))
    }

    fn migrate_task_rq(&self, task: TaskId, from: CoreId, token: Schedulable) -> Option<Schedulable> {
        let mut tasks = self.tasks.lock();
        let to = token.core();
        let entry = tasks.get_mut(&task)?;
        let key = (entry.vr, task);
        let old = if from == to {
            self.rqs[from.index()].lock().waiting.remove(&key)
        } else {
            // Both locks in ascending core order.
            let (lo, hi) = if from < to { (from, to) } else { (to, from) };
            let mut a = self.rqs[lo.index()].lock();
            let mut b = self.rqs[hi.index()].lock();
            let (src, dst) = if from < to { (&mut *a, &mut *b) } else { (&mut *b, &mut *a) };
            let old = src.waiting.remove(&key);
            entry.queued = None;
            Self::enqueue(dst, entry, token);
            return old;
        };
        entry.queued = None;
        Self::enqueue(&mut self.rqs[to.index()].lock(), entry, token);
        old
    }

    fn balance(&self, core: CoreId, busy: bool) -> Option<BalanceMove> {
        if busy {
            return None;
        }
        let tasks = self.tasks.lock();
        let mut lens: Vec<(usize, u32)> = Vec::new();
        for (i, rq) in self.rqs.iter().enumerate() {
            let rq = rq.lock();
            if i == core.index() && !rq.waiting.is_empty() {
                return None;
            }
            if i != core.index() && !rq.waiting.is_empty() {
                lens.push((rq.waiting.len(), i as u32));
            }
        }
        lens.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        for (_, from) in lens {
            let rq = self.rqs[from as usize].lock();
            let victim = rq.waiting.keys().map(|&(_, t)| t).find(|t| {
                tasks.get(t).is_none_or(|e| e.pinned.is_none() || e.pinned == Some(core.0))
            });
            if let Some(task) = victim {
                return Some(BalanceMove { task, from: CoreId(from) });
            }
        }
        None
    }

    fn balance_err(&self, _core: CoreId, _task: TaskId, token: Option<Schedulable>) {
        if let Some(token) = token {
            self.requeue(token);
        }
    }

    fn register_queue(&self, _queue: QueueId, _direction: HintDirection, _capacity: u32) -> bool {
        false
    }

    fn enter_queue(&self, _queue: QueueId, _pending: u32) {}

    fn unregister_queue(&self, _queue: QueueId) {}

    fn parse_hint(&self, _queue: QueueId, _hint: &HintRecord) -> Vec<(QueueId, HintRecord)> {
        Vec::new()
    }

    fn reregister_prep(&self) -> Result<UpgradeCapsule, String> {
        let mut tasks = self.tasks.lock();
        let mut tokens = Vec::new();
        let mut cores = Vec::new();
        for rq in &self.rqs {
            let mut rq = rq.lock();
            tokens.extend(std::mem::take(&mut rq.waiting).into_values());
            cores.push(CoreState { current: rq.current.take(), ran_ns: rq.ran_ns, wake_preempt: rq.wake_preempt });
        }
        let capsule = Capsule { tasks: std::mem::take(&mut *tasks), cores };
        let bytes = serde_json::to_vec(&capsule).map_err(|e| e.to_string())?;
        Ok(UpgradeCapsule { tag: self.info().capsule_tag(), bytes, tokens })
    }

    fn reregister_init(&self, capsule: UpgradeCapsule) -> Result<(), (String, UpgradeCapsule)> {
        if capsule.tag != self.info().capsule_tag() {
            return Err(("capsule tag mismatch".into(), capsule));
        }
        let state: Capsule = match serde_json::from_slice(&capsule.bytes) {
            Ok(s) => s,
            Err(e) => return Err((e.to_string(), capsule)),
        };
        if state.cores.len() != self.rqs.len() {
            return Err((format!("capsule has {} cores, expected {}", state.cores.len(), self.rqs.len()), capsule));
        }
        let mut tasks = self.tasks.lock();
        *tasks = state.tasks;
        for (rq, cs) in self.rqs.iter().zip(state.cores) {
            let mut rq = rq.lock();
            rq.current = cs.current;
            rq.ran_ns = cs.ran_ns;
            rq.wake_preempt = cs.wake_preempt;
        }
        for token in capsule.tokens {
            if let Some(entry) = tasks.get_mut(&token.task()) {
                Self::enqueue(&mut self.rqs[token.core().index()].lock(), entry, token);
            }
        }
        Ok(())
    }

    fn inspect(&self) -> Inspection {
        let tasks = self.tasks.lock();
        let tokens_held = self.rqs.iter().map(|rq| rq.lock().waiting.len()).sum();
        Inspection {
            tasks: tasks.iter().map(|(&t, e)| (t, e.vr)).collect(),
            tokens_held,
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::api::TokenRegistry;

    fn wfq(cores: u32) -> (Wfq, TokenRegistry) {
        (Wfq::new(WfqConfig::new(cores), &LockFactory::plain()), TokenRegistry::new())
    }

    fn attrs(nice: i8) -> TaskAttrs {
        TaskAttrs { nice, group: 0, pinned: None }
    }

    #[test]
    fn unit_weight_charges_wall_time() {
        assert_eq!(scaled_runtime(1_000_000, 0), 1_000_000);
    }

    #[test]
    fn nice_minus_five_charges_less() {
        assert_eq!(scaled_runtime(1_000_000, -5), 327_680);
    }

    #[test]
    fn wake_clamp_cases() {
        assert_eq!(wake_clamp(0, Some(100_000_000)), 94_000_000);
        assert_eq!(wake_clamp(99_000_000, Some(100_000_000)), 99_000_000);
        assert_eq!(wake_clamp(5, None), 5);
    }

    #[test]
    fn slice_formula() {
        assert_eq!(slice_ns(1), 6_000_000);
        assert_eq!(slice_ns(5), 1_200_000);
        assert_eq!(slice_ns(8), 750_000);
        assert_eq!(slice_ns(20), 750_000);
    }

    #[test]
    fn empty_queue_picks_idle() {
        let (p, _) = wfq(1);
        assert!(p.pick_next_task(CoreId(0), None, 0).token.is_none());
    }

    #[test]
    fn picks_lowest_vruntime() {
        let (p, mut reg) = wfq(1);
        for t in 0..3 {
            p.task_new(TaskId(t), attrs(0), reg.issue_token(TaskId(t), CoreId(0)).unwrap());
        }
        let a = p.pick_next_task(CoreId(0), None, 0).token.unwrap();
        assert_eq!(a.task(), TaskId(0));
        assert_eq!(reg.consume_token(a, CoreId(0)), crate::api::Verdict::Ok);
        // Task 0 ran 2ms; giving it back must put it behind the others.
        let cur = reg.issue_token(TaskId(0), CoreId(0)).unwrap();
        let b = p.pick_next_task(CoreId(0), Some(cur), 2_000_000).token.unwrap();
        assert_eq!(b.task(), TaskId(1));
        assert_eq!(p.vruntime(TaskId(0)), Some(2_000_000));
    }

    #[test]
    fn balance_steals_from_longest_queue() {
        let (p, mut reg) = wfq(3);
        let place = |p: &Wfq, reg: &mut TokenRegistry, t: u64, c: u32| {
            p.task_new(TaskId(t), attrs(0), reg.issue_token(TaskId(t), CoreId(c)).unwrap());
        };
        for t in 0..3 {
            place(&p, &mut reg, t, 1);
        }
        place(&p, &mut reg, 10, 2);
        assert_eq!(p.balance(CoreId(0), false), Some(BalanceMove { task: TaskId(0), from: CoreId(1) }));
        assert_eq!(p.balance(CoreId(0), true), None);
    }

    #[test]
    fn balance_tie_goes_to_lowest_core() {
        let (p, mut reg) = wfq(3);
        for (t, c) in [(0, 1), (1, 1), (2, 2), (3, 2)] {
            p.task_new(TaskId(t), attrs(0), reg.issue_token(TaskId(t), CoreId(c)).unwrap());
        }
        assert_eq!(p.balance(CoreId(0), false).map(|m| m.from), Some(CoreId(1)));
    }

    #[test]
    fn balance_with_nothing_waiting_is_none() {
        let (p, _) = wfq(3);
        assert_eq!(p.balance(CoreId(0), false), None);
    }

    #[test]
    fn select_prefers_least_loaded_then_tie_break() {
        let (p, mut reg) = wfq(4);
        let req = SelectRq { task: TaskId(9), group: 0, prev_core: None, waker_core: None, pinned: None };
        assert_eq!(p.select_task_rq(req), CoreId(0));
        let hi = Wfq::new(WfqConfig { tie_break: TieBreak::Highest, ..WfqConfig::new(4) }, &LockFactory::plain());
        assert_eq!(hi.select_task_rq(req), CoreId(3));
        p.task_new(TaskId(1), attrs(0), reg.issue_token(TaskId(1), CoreId(0)).unwrap());
        assert_eq!(p.select_task_rq(req), CoreId(1));
        assert_eq!(p.select_task_rq(SelectRq { pinned: Some(CoreId(0)), ..req }), CoreId(0));
    }

    #[test]
    fn migrate_returns_old_token() {
        let (p, mut reg) = wfq(2);
        p.task_new(TaskId(3), attrs(0), reg.issue_token(TaskId(3), CoreId(1)).unwrap());
        let (_, old_serial) = reg.revoke(TaskId(3)).unwrap();
        let new = reg.issue_token(TaskId(3), CoreId(0)).unwrap();
        let back = p.migrate_task_rq(TaskId(3), CoreId(1), new).unwrap();
        assert_eq!(back.serial(), old_serial);
        let picked = p.pick_next_task(CoreId(0), None, 0).token.unwrap();
        assert_eq!(reg.consume_token(picked, CoreId(0)), crate::api::Verdict::Ok);
    }

    #[test]
    fn upgrade_capsule_round_trips_state() {
        let (p, mut reg) = wfq(2);
        for t in 0..4 {
            p.task_new(TaskId(t), attrs(t as i8), reg.issue_token(TaskId(t), CoreId((t % 2) as u32)).unwrap());
        }
        let before = p.inspect();
        let capsule = p.reregister_prep().unwrap();
        assert_eq!(p.inspect().tokens_held, 0);
        let q = Wfq::new(WfqConfig { version: "2".into(), ..WfqConfig::new(2) }, &LockFactory::plain());
        q.reregister_init(capsule).unwrap();
        assert_eq!(q.inspect(), before);
    }
}
