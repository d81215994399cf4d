//! Hint-driven co-location.
//!
//! Workloads send `{task: u64, group: u64}` records (16 bytes, little-endian)
//! naming which tasks belong together. Every task of a group is placed on the
//! group's core, chosen the first time the group is placed. Unhinted tasks go
//! to a uniformly random core. Each core serves its own FIFO with a
//! round-robin slice and never steals.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::api::{
    BalanceMove, CoreId, Inspection, Pick, PolicyInfo, Schedulable, SchedulerPolicy, SelectRq, TaskAttrs, TaskId,
    TickDecision, UpgradeCapsule,
};
use crate::hints::{HintDirection, HintRecord, QueueId};
use crate::record::{LockFactory, TrackedMutex};

pub const HINT_WIDTH: usize = 16;
pub const DEFAULT_OVERLOAD: usize = 8;
pub const RR_SLICE_NS: u64 = 1_000_000;
pub const CAPSULE_FORMAT: &str = "locality-state/1";

#[derive(Serialize, Deserialize)]
struct Shared {
    task_group: BTreeMap<TaskId, u64>,
    group_core: BTreeMap<u64, u32>,
    groups_on_core: Vec<u32>,
    running: Vec<Option<TaskId>>,
    ran_ns: Vec<u64>,
    known: BTreeSet<TaskId>,
    up_queues: BTreeSet<QueueId>,
    rng_seed: [u8; 32],
    rng_pos: u128,
    overload_overrides: u64,
}

struct State {
    shared: Shared,
    queues: Vec<VecDeque<Schedulable>>,
    rng: ChaCha8Rng,
}

impl State {
    fn load(&self, core: usize) -> usize {
        self.queues[core].len() + self.shared.running[core].is_some() as usize
    }

    fn least_loaded(&self) -> usize {
        (0..self.queues.len()).min_by_key(|&c| (self.load(c), c)).unwrap_or(0)
    }

    fn holds(&self, task: TaskId) -> bool {
        self.queues.iter().any(|q| q.iter().any(|t| t.task() == task))
    }
}

pub struct Locality {
    overload: usize,
    state: TrackedMutex<State>,
}

impl Locality {
    pub fn new(num_cores: u32, seed: u64, locks: &LockFactory) -> Self {
        Self::with_overload(num_cores, seed, DEFAULT_OVERLOAD, locks)
    }

    pub fn with_overload(num_cores: u32, seed: u64, overload: usize, locks: &LockFactory) -> Self {
        let n = num_cores as usize;
        let rng = ChaCha8Rng::seed_from_u64(seed);
        let shared = Shared {
            task_group: BTreeMap::new(),
            group_core: BTreeMap::new(),
            groups_on_core: vec![0; n],
            running: vec![None; n],
            ran_ns: vec![0; n],
            known: BTreeSet::new(),
            up_queues: BTreeSet::new(),
            rng_seed: rng.get_seed(),
            rng_pos: 0,
            overload_overrides: 0,
        };
        let state = State { shared, queues: (0..n).map(|_| VecDeque::new()).collect(), rng };
        Locality { overload, state: locks.mutex(state) }
    }

    /// Core a group's tasks are placed on, if the group has been placed.
    pub fn group_core(&self, group: u64) -> Option<CoreId> {
        self.state.lock().shared.group_core.get(&group).map(|&c| CoreId(c))
    }

    pub fn overload_overrides(&self) -> u64 {
        self.state.lock().shared.overload_overrides
    }

    fn clear_running(s: &mut State, core: CoreId, task: TaskId) {
        if s.shared.running[core.index()] == Some(task) {
            s.shared.running[core.index()] = None;
        }
    }
}

impl SchedulerPolicy for Locality {
    fn info(&self) -> PolicyInfo {
        PolicyInfo {
            name: "locality".into(),
            version: "1".into(),
            capsule_format: CAPSULE_FORMAT.into(),
            up_hint_width: HINT_WIDTH,
            down_hint_width: 0,
        }
    }

    fn pick_next_task(&self, core: CoreId, current: Option<Schedulable>, _runtime_delta_ns: u64) -> Pick {
        let mut s = self.state.lock();
        let c = core.index();
        if let Some(tok) = current {
            s.queues[c].push_back(tok);
        }
        s.shared.running[c] = None;
        s.shared.ran_ns[c] = 0;
        match s.queues[c].pop_front() {
            Some(tok) => {
                s.shared.running[c] = Some(tok.task());
                Pick::run(tok)
            }
            None => Pick::idle(),
        }
    }

    fn pnt_err(&self, core: CoreId, token: Schedulable) {
        let mut s = self.state.lock();
        Self::clear_running(&mut s, core, token.task());
        if s.shared.known.contains(&token.task()) && !s.holds(token.task()) {
            let c = token.core().index().min(s.queues.len() - 1);
            s.queues[c].push_front(token);
        }
    }

    fn task_new(&self, task: TaskId, _attrs: TaskAttrs, token: Schedulable) {
        let mut s = self.state.lock();
        s.shared.known.insert(task);
        s.queues[token.core().index()].push_back(token);
    }

    fn task_wakeup(&self, _task: TaskId, token: Schedulable) {
        self.state.lock().queues[token.core().index()].push_back(token);
    }

    fn task_blocked(&self, task: TaskId, core: CoreId, _runtime_delta_ns: u64) {
        Self::clear_running(&mut self.state.lock(), core, task);
    }

    fn task_dead(&self, task: TaskId, core: CoreId, _runtime_delta_ns: u64) {
        let mut s = self.state.lock();
        Self::clear_running(&mut s, core, task);
        s.shared.known.remove(&task);
        s.shared.task_group.remove(&task);
    }

    fn task_tick(&self, core: CoreId, _task: TaskId, runtime_delta_ns: u64) -> TickDecision {
        let mut s = self.state.lock();
        let c = core.index();
        s.shared.ran_ns[c] += runtime_delta_ns;
        TickDecision { preempt: s.shared.ran_ns[c] >= RR_SLICE_NS && !s.queues[c].is_empty(), timer_ns: None }
    }

    fn select_task_rq(&self, req: SelectRq) -> CoreId {
        if let Some(core) = req.pinned {
            return core;
        }
        let mut s = self.state.lock();
        let Some(&group) = s.shared.task_group.get(&req.task) else {
            let n = s.queues.len();
            return CoreId(s.rng.random_range(0..n) as u32);
        };
        let core = match s.shared.group_core.get(&group) {
            Some(&c) => c as usize,
            None => {
                let c = (0..s.queues.len())
                    .min_by_key(|&c| (s.shared.groups_on_core[c], s.load(c), c))
                    .unwrap_or(0);
                s.shared.group_core.insert(group, c as u32);
                s.shared.groups_on_core[c] += 1;
                c
            }
        };
        if s.load(core) > self.overload {
            s.shared.overload_overrides += 1;
            return CoreId(s.least_loaded() as u32);
        }
        CoreId(core as u32)
    }

    fn migrate_task_rq(&self, task: TaskId, from: CoreId, token: Schedulable) -> Option<Schedulable> {
        let mut s = self.state.lock();
        let q = &mut s.queues[from.index()];
        let old = q.iter().position(|t| t.task() == task).and_then(|p| q.remove(p));
        s.queues[token.core().index()].push_back(token);
        old
    }

    fn balance(&self, _core: CoreId, _busy: bool) -> Option<BalanceMove> {
        None
    }

    fn balance_err(&self, core: CoreId, _task: TaskId, token: Option<Schedulable>) {
        if let Some(token) = token {
            self.pnt_err(core, token);
        }
    }

    fn register_queue(&self, queue: QueueId, direction: HintDirection, _capacity: u32) -> bool {
        if direction != HintDirection::UserToSched {
            return false;
        }
        self.state.lock().shared.up_queues.insert(queue);
        true
    }

    fn enter_queue(&self, _queue: QueueId, _pending: u32) {}

    fn unregister_queue(&self, queue: QueueId) {
        self.state.lock().shared.up_queues.remove(&queue);
    }

    fn parse_hint(&self, queue: QueueId, hint: &HintRecord) -> Vec<(QueueId, HintRecord)> {
        let mut s = self.state.lock();
        if !s.shared.up_queues.contains(&queue) {
            return Vec::new();
        }
        if let (Some(task), Some(group)) = (hint.word(0), hint.word(1)) {
            s.shared.task_group.insert(TaskId(task), group);
        }
        Vec::new()
    }

    fn reregister_prep(&self) -> Result<UpgradeCapsule, String> {
        let mut s = self.state.lock();
        s.shared.rng_pos = s.rng.get_word_pos();
        let tokens: Vec<Schedulable> = s.queues.iter_mut().flat_map(|q| q.drain(..)).collect();
        let bytes = serde_json::to_vec(&s.shared).map_err(|e| e.to_string())?;
        Ok(UpgradeCapsule { tag: self.info().capsule_tag(), bytes, tokens })
    }

    fn reregister_init(&self, capsule: UpgradeCapsule) -> Result<(), (String, UpgradeCapsule)> {
        if capsule.tag != self.info().capsule_tag() {
            return Err(("capsule tag mismatch".into(), capsule));
        }
        let shared: Shared = match serde_json::from_slice(&capsule.bytes) {
            Ok(c) => c,
            Err(e) => return Err((e.to_string(), capsule)),
        };
        let mut s = self.state.lock();
        if shared.running.len() != s.queues.len() {
            return Err(("core count mismatch".into(), capsule));
        }
        let mut rng = ChaCha8Rng::from_seed(shared.rng_seed);
        rng.set_word_pos(shared.rng_pos);
        s.rng = rng;
        s.shared = shared;
        for tok in capsule.tokens {
            let c = tok.core().index();
            s.queues[c].push_back(tok);
        }
        Ok(())
    }

    fn inspect(&self) -> Inspection {
        let s = self.state.lock();
        Inspection {
            tasks: s.shared.known.iter().map(|&t| (t, 0)).collect(),
            tokens_held: s.queues.iter().map(|q| q.len()).sum(),
            ..Default::default()
        }
    }
}
