//! Centralized first-come-first-serve with microsecond preemption.
//!
//! All runnable tokens sit in one global FIFO. A core runs the earliest
//! entry bound to it, and `balance` pulls the FIFO head over to whichever
//! core is dispatching, so the queue is served in arrival order across all
//! cores. A task that has run for a full slice while anything is waiting is
//! preempted and goes to the back.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::api::{
    BalanceMove, CoreId, Inspection, Pick, PolicyInfo, Schedulable, SchedulerPolicy, SelectRq, TaskAttrs, TaskId,
    TickDecision, UpgradeCapsule,
};
use crate::hints::{HintDirection, HintRecord, QueueId};
use crate::record::{LockFactory, TrackedMutex};

pub const PREEMPT_SLICE_NS: u64 = 10_000;
pub const CAPSULE_FORMAT: &str = "shinjuku-state/1";

#[derive(Default, Serialize, Deserialize)]
struct CoreSlot {
    running: Option<TaskId>,
    ran_ns: u64,
}

struct State {
    fifo: VecDeque<Schedulable>,
    cores: Vec<CoreSlot>,
    tasks: BTreeSet<TaskId>,
}

impl State {
    fn bound(&self, core: CoreId) -> usize {
        self.fifo.iter().filter(|t| t.core() == core).count()
    }

    fn holds(&self, task: TaskId) -> bool {
        self.fifo.iter().any(|t| t.task() == task)
    }
}

#[derive(Serialize, Deserialize)]
struct Capsule {
    cores: Vec<CoreSlot>,
    tasks: BTreeSet<TaskId>,
}

pub struct Shinjuku {
    slice_ns: u64,
    state: TrackedMutex<State>,
}

impl Shinjuku {
    pub fn new(num_cores: u32, locks: &LockFactory) -> Self {
        Self::with_slice(num_cores, PREEMPT_SLICE_NS, locks)
    }

    pub fn with_slice(num_cores: u32, slice_ns: u64, locks: &LockFactory) -> Self {
        let state = State {
            fifo: VecDeque::new(),
            cores: (0..num_cores).map(|_| CoreSlot::default()).collect(),
            tasks: BTreeSet::new(),
        };
        Shinjuku { slice_ns, state: locks.mutex(state) }
    }

    fn clear_running(s: &mut State, core: CoreId, task: TaskId) {
        if let Some(slot) = s.cores.get_mut(core.index()) {
            if slot.running == Some(task) {
                slot.running = None;
            }
        }
    }
}

impl SchedulerPolicy for Shinjuku {
    fn info(&self) -> PolicyInfo {
        PolicyInfo {
            name: "shinjuku".into(),
            version: "1".into(),
            capsule_format: CAPSULE_FORMAT.into(),
            up_hint_width: 0,
            down_hint_width: 0,
        }
    }

    fn pick_next_task(&self, core: CoreId, current: Option<Schedulable>, _runtime_delta_ns: u64) -> Pick {
        let mut s = self.state.lock();
        if let Some(tok) = current {
            s.fifo.push_back(tok);
        }
        let slot = &mut s.cores[core.index()];
        slot.running = None;
        slot.ran_ns = 0;
        let Some(pos) = s.fifo.iter().position(|t| t.core() == core) else {
            return Pick::idle();
        };
        let token = s.fifo.remove(pos).unwrap();
        s.cores[core.index()].running = Some(token.task());
        Pick::run(token).with_timer(self.slice_ns)
    }

    fn pnt_err(&self, core: CoreId, token: Schedulable) {
        let mut s = self.state.lock();
        Self::clear_running(&mut s, core, token.task());
        if s.tasks.contains(&token.task()) && !s.holds(token.task()) {
            s.fifo.push_front(token);
        }
    }

    fn task_new(&self, task: TaskId, _attrs: TaskAttrs, token: Schedulable) {
        let mut s = self.state.lock();
        s.tasks.insert(task);
        s.fifo.push_back(token);
    }

    fn task_wakeup(&self, _task: TaskId, token: Schedulable) {
        self.state.lock().fifo.push_back(token);
    }

    fn task_blocked(&self, task: TaskId, core: CoreId, _runtime_delta_ns: u64) {
        Self::clear_running(&mut self.state.lock(), core, task);
    }

    fn task_dead(&self, task: TaskId, core: CoreId, _runtime_delta_ns: u64) {
        let mut s = self.state.lock();
        Self::clear_running(&mut s, core, task);
        s.tasks.remove(&task);
    }

    fn task_tick(&self, core: CoreId, _task: TaskId, runtime_delta_ns: u64) -> TickDecision {
        let mut s = self.state.lock();
        let waiting = !s.fifo.is_empty();
        let slot = &mut s.cores[core.index()];
        slot.ran_ns += runtime_delta_ns;
        if slot.ran_ns < self.slice_ns {
            TickDecision { preempt: false, timer_ns: Some(self.slice_ns - slot.ran_ns) }
        } else if waiting {
            TickDecision { preempt: true, timer_ns: None }
        } else {
            TickDecision { preempt: false, timer_ns: Some(self.slice_ns) }
        }
    }

    fn select_task_rq(&self, req: SelectRq) -> CoreId {
        if let Some(core) = req.pinned {
            return core;
        }
        let s = self.state.lock();
        let load = |i: usize| s.bound(CoreId(i as u32)) + s.cores[i].running.is_some() as usize;
        let best = (0..s.cores.len()).min_by_key(|&i| (load(i), i)).unwrap_or(0);
        match req.prev_core {
            Some(prev) if prev.index() < s.cores.len() && load(prev.index()) == load(best) => prev,
            _ => CoreId(best as u32),
        }
    }

    fn migrate_task_rq(&self, task: TaskId, _from: CoreId, token: Schedulable) -> Option<Schedulable> {
        let mut s = self.state.lock();
        match s.fifo.iter().position(|t| t.task() == task) {
            Some(pos) => Some(std::mem::replace(&mut s.fifo[pos], token)),
            None => {
                s.fifo.push_back(token);
                None
            }
        }
    }

    fn balance(&self, core: CoreId, _busy: bool) -> Option<BalanceMove> {
        let s = self.state.lock();
        let head = s.fifo.front()?;
        (head.core() != core).then(|| BalanceMove { task: head.task(), from: head.core() })
    }

    fn balance_err(&self, _core: CoreId, _task: TaskId, token: Option<Schedulable>) {
        if let Some(token) = token {
            let mut s = self.state.lock();
            if !s.holds(token.task()) {
                s.fifo.push_front(token);
            }
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
        let mut s = self.state.lock();
        let tokens: Vec<Schedulable> = s.fifo.drain(..).collect();
        let n = s.cores.len();
        let capsule = Capsule {
            cores: std::mem::replace(&mut s.cores, (0..n).map(|_| CoreSlot::default()).collect()),
            tasks: std::mem::take(&mut s.tasks),
        };
        let bytes = serde_json::to_vec(&capsule).map_err(|e| e.to_string())?;
        Ok(UpgradeCapsule { tag: self.info().capsule_tag(), bytes, tokens })
    }

    fn reregister_init(&self, capsule: UpgradeCapsule) -> Result<(), (String, UpgradeCapsule)> {
        if capsule.tag != self.info().capsule_tag() {
            return Err(("capsule tag mismatch".into(), capsule));
        }
        let state: Capsule = match serde_json::from_slice(&capsule.bytes) {
            Ok(c) => c,
            Err(e) => return Err((e.to_string(), capsule)),
        };
        let mut s = self.state.lock();
        s.cores = state.cores;
        s.tasks = state.tasks;
        s.fifo = capsule.tokens.into();
        Ok(())
    }

    fn inspect(&self) -> Inspection {
        let s = self.state.lock();
        Inspection {
            tasks: s.tasks.iter().map(|&t| (t, 0)).collect(),
            tokens_held: s.fifo.len(),
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::api::TokenRegistry;

    fn attrs() -> TaskAttrs {
        TaskAttrs { nice: 0, group: 0, pinned: None }
    }

    #[test]
    fn serves_in_arrival_order_and_arms_slice_timer() {
        let p = Shinjuku::new(1, &LockFactory::plain());
        let mut reg = TokenRegistry::new();
        for t in [5, 2, 9] {
            p.task_new(TaskId(t), attrs(), reg.issue_token(TaskId(t), CoreId(0)).unwrap());
        }
        let pick = p.pick_next_task(CoreId(0), None, 0);
        assert_eq!(pick.timer_ns, Some(PREEMPT_SLICE_NS));
        assert_eq!(pick.token.unwrap().task(), TaskId(5));
    }

    #[test]
    fn preempts_only_when_others_wait() {
        let p = Shinjuku::new(1, &LockFactory::plain());
        let mut reg = TokenRegistry::new();
        p.task_new(TaskId(1), attrs(), reg.issue_token(TaskId(1), CoreId(0)).unwrap());
        let _running = p.pick_next_task(CoreId(0), None, 0).token.unwrap();
        assert!(!p.task_tick(CoreId(0), TaskId(1), 10_000).preempt);
        p.task_new(TaskId(2), attrs(), reg.issue_token(TaskId(2), CoreId(0)).unwrap());
        assert!(p.task_tick(CoreId(0), TaskId(1), 1).preempt);
    }

    #[test]
    fn preempted_task_goes_to_the_back() {
        let p = Shinjuku::new(1, &LockFactory::plain());
        let mut reg = TokenRegistry::new();
        for t in 1..=3 {
            p.task_new(TaskId(t), attrs(), reg.issue_token(TaskId(t), CoreId(0)).unwrap());
        }
        let first = p.pick_next_task(CoreId(0), None, 0).token.unwrap();
        reg.consume_token(first, CoreId(0));
        let cur = reg.issue_token(TaskId(1), CoreId(0)).unwrap();
        let next = p.pick_next_task(CoreId(0), Some(cur), 10_000).token.unwrap();
        assert_eq!(next.task(), TaskId(2));
        let s = p.state.lock();
        let rest: Vec<TaskId> = s.fifo.iter().map(|t| t.task()).collect();
        assert_eq!(rest, vec![TaskId(3), TaskId(1)]);
    }

    #[test]
    fn balance_pulls_head_bound_elsewhere() {
        let p = Shinjuku::new(2, &LockFactory::plain());
        let mut reg = TokenRegistry::new();
        p.task_new(TaskId(1), attrs(), reg.issue_token(TaskId(1), CoreId(1)).unwrap());
        assert_eq!(p.balance(CoreId(0), false), Some(BalanceMove { task: TaskId(1), from: CoreId(1) }));
        assert_eq!(p.balance(CoreId(1), false), None);
    }

    #[test]
    fn select_prefers_idle_then_least_bound() {
        let p = Shinjuku::new(3, &LockFactory::plain());
        let mut reg = TokenRegistry::new();
        let req = SelectRq { task: TaskId(7), group: 0, prev_core: None, waker_core: None, pinned: None };
        assert_eq!(p.select_task_rq(req), CoreId(0));
        p.task_new(TaskId(1), attrs(), reg.issue_token(TaskId(1), CoreId(0)).unwrap());
        assert_eq!(p.select_task_rq(req), CoreId(1));
        let back = SelectRq { prev_core: Some(CoreId(2)), ..req };
        assert_eq!(p.select_task_rq(back), CoreId(2));
        let busy = SelectRq { prev_core: Some(CoreId(0)), ..req };
        assert_eq!(p.select_task_rq(busy), CoreId(1));
    }
}
