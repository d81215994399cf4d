//! Whole-core arbiter.
//!
//! Cores `0..reserved` are never granted. The rest are handed out to
//! applications (task group ids) that ask for them with a 16-byte up hint
//! `{app: u64, cores: u64}`. When demand exceeds supply every active app gets
//! a water-filled share; leftover single cores go to the apps holding the
//! fewest cores, earlier requesters first. Taking a core from an app sends it
//! a 16-byte down notice `{app: u64, core: u64}`. An idle core is released
//! at once; a busy one is preempted and released when it next dispatches.
//!
//! A granted core runs only its owner's tasks. Every other core runs the
//! tasks of apps that hold no grant.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::api::{
    BalanceMove, CoreId, Inspection, Pick, PolicyInfo, Schedulable, SchedulerPolicy, SelectRq, TaskAttrs, TaskId,
    TickDecision, UpgradeCapsule,
};
use crate::hints::{HintDirection, HintRecord, QueueId};
use crate::record::{LockFactory, TrackedMutex};

pub const HINT_WIDTH: usize = 16;
pub const RR_SLICE_NS: u64 = 1_000_000;
pub const CAPSULE_FORMAT: &str = "arbiter-state/1";

/// Shares of `supply` cores for `(app, requested, held)` triples listed in
/// request order. Never exceeds a request.
pub fn fair_shares(supply: u32, demand: &[(u32, u32, u32)]) -> BTreeMap<u32, u32> {
    let mut alloc: BTreeMap<u32, u32> = demand.iter().map(|&(app, _, _)| (app, 0)).collect();
    let mut remaining = supply;
    loop {
        let unsat: Vec<_> = demand.iter().filter(|&&(app, req, _)| alloc[&app] < req).collect();
        if unsat.is_empty() || remaining == 0 {
            break;
        }
        let share = remaining / unsat.len() as u32;
        if share == 0 {
            let mut order: Vec<_> = unsat.iter().enumerate().collect();
            order.sort_by_key(|&(pos, &&(_, _, held))| (held, pos));
            for (_, &&(app, _, _)) in order.into_iter().take(remaining as usize) {
                *alloc.get_mut(&app).unwrap() += 1;
            }
            break;
        }
        for &&(app, req, _) in &unsat {
            let a = alloc.get_mut(&app).unwrap();
            let give = share.min(req - *a);
            *a += give;
            remaining -= give;
        }
    }
    alloc
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct TaskInfo {
    app: u32,
    pinned: Option<u32>,
}

#[derive(Default, Serialize, Deserialize)]
struct Shared {
    tasks: BTreeMap<TaskId, TaskInfo>,
    /// Non-zero requests, in the order apps first asked.
    requests: Vec<(u32, u32)>,
    targets: BTreeMap<u32, u32>,
    owner: Vec<Option<u32>>,
    last_owner: Vec<Option<u32>>,
    pending: Vec<bool>,
    running: Vec<Option<TaskId>>,
    ran_ns: Vec<u64>,
    up_queues: BTreeSet<QueueId>,
    down_queue: Option<QueueId>,
    reclaims: u64,
}

struct State {
    reserved: usize,
    shared: Shared,
    queues: Vec<VecDeque<Schedulable>>,
}

impl State {
    fn held(&self, app: u32) -> u32 {
        let s = &self.shared;
        (0..s.owner.len()).filter(|&c| s.owner[c] == Some(app) && !s.pending[c]).count() as u32
    }

    fn has_grant(&self, app: u32) -> bool {
        let s = &self.shared;
        (0..s.owner.len()).any(|c| s.owner[c] == Some(app))
    }

    fn eligible(&self, task: TaskId, core: usize) -> bool {
        let info = self.shared.tasks.get(&task).copied().unwrap_or(TaskInfo { app: 0, pinned: None });
        if let Some(p) = info.pinned {
            return p as usize == core;
        }
        if self.shared.pending[core] {
            return false;
        }
        match self.shared.owner[core] {
            Some(owner) => owner == info.app,
            None => !self.has_grant(info.app),
        }
    }

    fn load(&self, core: usize) -> usize {
        self.queues[core].len() + self.shared.running[core].is_some() as usize
    }

    fn release(&mut self, core: usize) {
        let s = &mut self.shared;
        s.last_owner[core] = s.owner[core].take();
        s.pending[core] = false;
    }

    fn grantable(&self) -> u32 {
        (self.queues.len() - self.reserved) as u32
    }

    /// Recomputes targets and reclaims cores above them. Returns the
    /// `(app, core)` pairs taken away.
    fn rebalance(&mut self) -> Vec<(u32, u32)> {
        let demand: Vec<_> = self.shared.requests.iter().map(|&(app, req)| (app, req, self.held(app))).collect();
        let mut targets = fair_shares(self.grantable(), &demand);
        let owners: BTreeSet<u32> = self.shared.owner.iter().flatten().copied().collect();
        for app in owners {
            targets.entry(app).or_insert(0);
        }
        self.shared.targets = targets.clone();
        let mut taken = Vec::new();
        for (&app, &target) in &targets {
            let mut excess = self.held(app).saturating_sub(target);
            // Idle cores first, then the highest-numbered.
            let mut mine: Vec<usize> = (self.reserved..self.queues.len())
                .filter(|&c| self.shared.owner[c] == Some(app) && !self.shared.pending[c])
                .collect();
            mine.sort_by_key(|&c| (self.shared.running[c].is_some(), std::cmp::Reverse(c)));
            for c in mine {
                if excess == 0 {
                    break;
                }
                excess -= 1;
                self.shared.reclaims += 1;
                taken.push((app, c as u32));
                if self.shared.running[c].is_some() {
                    self.shared.pending[c] = true;
                } else {
                    self.release(c);
                }
            }
        }
        self.fill();
        taken
    }

    /// Grants free cores to apps below target, warm cores first.
    fn fill(&mut self) {
        let order: Vec<u32> = self.shared.requests.iter().map(|&(app, _)| app).collect();
        for app in order {
            let target = self.shared.targets.get(&app).copied().unwrap_or(0);
            let s = &self.shared;
            let owned = (0..s.owner.len()).filter(|&c| s.owner[c] == Some(app)).count() as u32;
            let mut want = target.saturating_sub(owned);
            let mut free: Vec<usize> = (self.reserved..self.queues.len())
                .filter(|&c| s.owner[c].is_none())
                .collect();
            free.sort_by_key(|&c| (s.last_owner[c] != Some(app), c));
            for c in free {
                if want == 0 {
                    break;
                }
                want -= 1;
                self.shared.owner[c] = Some(app);
            }
        }
    }
}

pub struct Arbiter {
    state: TrackedMutex<State>,
}

impl Arbiter {
    pub fn new(num_cores: u32, reserved: u32, locks: &LockFactory) -> Self {
        let n = num_cores as usize;
        let reserved = (reserved as usize).clamp(1, n.max(1));
        let shared = Shared {
            owner: vec![None; n],
            last_owner: vec![None; n],
            pending: vec![false; n],
            running: vec![None; n],
            ran_ns: vec![0; n],
            ..Default::default()
        };
        let state = State { reserved, shared, queues: (0..n).map(|_| VecDeque::new()).collect() };
        Arbiter { state: locks.mutex(state) }
    }

    /// Current owner of every core, counting cores awaiting release.
    pub fn owners(&self) -> Vec<Option<u32>> {
        self.state.lock().shared.owner.clone()
    }

    pub fn pending_reclaims(&self) -> Vec<CoreId> {
        let s = self.state.lock();
        (0..s.queues.len()).filter(|&c| s.shared.pending[c]).map(|c| CoreId(c as u32)).collect()
    }

    pub fn reserved(&self) -> u32 {
        self.state.lock().reserved as u32
    }
}

impl SchedulerPolicy for Arbiter {
    fn info(&self) -> PolicyInfo {
        PolicyInfo {
            name: "arbiter".into(),
            version: "1".into(),
            capsule_format: CAPSULE_FORMAT.into(),
            up_hint_width: HINT_WIDTH,
            down_hint_width: HINT_WIDTH,
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
        if s.shared.pending[c] {
            s.release(c);
            s.fill();
        }
        let st = &*s;
        let Some(pos) = st.queues[c].iter().position(|t| st.eligible(t.task(), c)) else {
            return Pick::idle();
        };
        let tok = s.queues[c].remove(pos).unwrap();
        s.shared.running[c] = Some(tok.task());
        Pick::run(tok)
    }

    fn pnt_err(&self, core: CoreId, token: Schedulable) {
        let mut s = self.state.lock();
        if s.shared.running[core.index()] == Some(token.task()) {
            s.shared.running[core.index()] = None;
        }
        let held = s.queues.iter().any(|q| q.iter().any(|t| t.task() == token.task()));
        if s.shared.tasks.contains_key(&token.task()) && !held {
            let c = token.core().index();
            s.queues[c].push_front(token);
        }
    }

    fn task_new(&self, task: TaskId, attrs: TaskAttrs, token: Schedulable) {
        let mut s = self.state.lock();
        s.shared.tasks.insert(task, TaskInfo { app: attrs.group, pinned: attrs.pinned.map(|c| c.0) });
        s.queues[token.core().index()].push_back(token);
    }

    fn task_wakeup(&self, _task: TaskId, token: Schedulable) {
        self.state.lock().queues[token.core().index()].push_back(token);
    }

    fn task_blocked(&self, task: TaskId, core: CoreId, _runtime_delta_ns: u64) {
        let mut s = self.state.lock();
        if s.shared.running[core.index()] == Some(task) {
            s.shared.running[core.index()] = None;
        }
    }

    fn task_dead(&self, task: TaskId, core: CoreId, _runtime_delta_ns: u64) {
        let mut s = self.state.lock();
        if s.shared.running[core.index()] == Some(task) {
            s.shared.running[core.index()] = None;
        }
        s.shared.tasks.remove(&task);
    }

    fn task_tick(&self, core: CoreId, task: TaskId, runtime_delta_ns: u64) -> TickDecision {
        let mut s = self.state.lock();
        let c = core.index();
        s.shared.ran_ns[c] += runtime_delta_ns;
        let st = &*s;
        let others = st.queues[c].iter().any(|t| st.eligible(t.task(), c));
        let preempt = !st.eligible(task, c) || (st.shared.ran_ns[c] >= RR_SLICE_NS && others);
        TickDecision { preempt, timer_ns: None }
    }

    fn select_task_rq(&self, req: SelectRq) -> CoreId {
        let mut s = self.state.lock();
        if let Some(info) = s.shared.tasks.get_mut(&req.task) {
            info.pinned = req.pinned.map(|c| c.0);
        }
        if let Some(core) = req.pinned {
            return core;
        }
        let probe = req.task;
        let candidates: Vec<usize> = (0..s.queues.len())
            .filter(|&c| {
                if s.shared.tasks.contains_key(&probe) {
                    s.eligible(probe, c)
                } else {
                    !s.shared.pending[c] && s.shared.owner[c].is_none_or(|o| o == req.group)
                }
            })
            .collect();
        let best = candidates.into_iter().min_by_key(|&c| (s.load(c), c)).unwrap_or(0);
        CoreId(best as u32)
    }

    fn migrate_task_rq(&self, task: TaskId, from: CoreId, token: Schedulable) -> Option<Schedulable> {
        let mut s = self.state.lock();
        let q = &mut s.queues[from.index()];
        let old = q.iter().position(|t| t.task() == task).and_then(|p| q.remove(p));
        s.queues[token.core().index()].push_back(token);
        old
    }

    fn balance(&self, core: CoreId, busy: bool) -> Option<BalanceMove> {
        if busy {
            return None;
        }
        let s = self.state.lock();
        let c = core.index();
        if s.queues[c].iter().any(|t| s.eligible(t.task(), c)) {
            return None;
        }
        let mut sources: Vec<usize> = (0..s.queues.len()).filter(|&o| o != c).collect();
        sources.sort_by_key(|&o| (std::cmp::Reverse(s.queues[o].len()), o));
        for o in sources {
            // The source core must not want the task itself.
            if let Some(t) = s.queues[o].iter().find(|t| s.eligible(t.task(), c) && !s.eligible(t.task(), o)) {
                return Some(BalanceMove { task: t.task(), from: CoreId(o as u32) });
            }
        }
        None
    }

    fn balance_err(&self, core: CoreId, _task: TaskId, token: Option<Schedulable>) {
        if let Some(token) = token {
            self.pnt_err(core, token);
        }
    }

    fn register_queue(&self, queue: QueueId, direction: HintDirection, _capacity: u32) -> bool {
        let mut s = self.state.lock();
        match direction {
            HintDirection::UserToSched => {
                s.shared.up_queues.insert(queue);
                true
            }
            HintDirection::SchedToUser if s.shared.down_queue.is_none() => {
                s.shared.down_queue = Some(queue);
                true
            }
            HintDirection::SchedToUser => false,
        }
    }

    fn enter_queue(&self, _queue: QueueId, _pending: u32) {}

    fn unregister_queue(&self, queue: QueueId) {
        let mut s = self.state.lock();
        s.shared.up_queues.remove(&queue);
        if s.shared.down_queue == Some(queue) {
            s.shared.down_queue = None;
        }
    }

    fn parse_hint(&self, queue: QueueId, hint: &HintRecord) -> Vec<(QueueId, HintRecord)> {
        let mut s = self.state.lock();
        if !s.shared.up_queues.contains(&queue) {
            return Vec::new();
        }
        let (Some(app), Some(n)) = (hint.word(0), hint.word(1)) else {
            return Vec::new();
        };
        let (app, n) = (app as u32, n.min(u32::MAX as u64) as u32);
        let reqs = &mut s.shared.requests;
        match reqs.iter().position(|&(a, _)| a == app) {
            Some(i) if n == 0 => {
                reqs.remove(i);
            }
            Some(i) => reqs[i].1 = n,
            None if n > 0 => reqs.push((app, n)),
            None => {}
        }
        let taken = s.rebalance();
        match s.shared.down_queue {
            Some(down) => taken
                .into_iter()
                .map(|(app, core)| (down, HintRecord::from_words(&[app as u64, core as u64])))
                .collect(),
            None => Vec::new(),
        }
    }

    fn reregister_prep(&self) -> Result<UpgradeCapsule, String> {
        let mut s = self.state.lock();
        let tokens: Vec<Schedulable> = s.queues.iter_mut().flat_map(|q| q.drain(..)).collect();
        let bytes = serde_json::to_vec(&(s.reserved, &s.shared)).map_err(|e| e.to_string())?;
        Ok(UpgradeCapsule { tag: self.info().capsule_tag(), bytes, tokens })
    }

    fn reregister_init(&self, capsule: UpgradeCapsule) -> Result<(), (String, UpgradeCapsule)> {
        if capsule.tag != self.info().capsule_tag() {
            return Err(("capsule tag mismatch".into(), capsule));
        }
        let (reserved, shared): (usize, Shared) = match serde_json::from_slice(&capsule.bytes) {
            Ok(v) => v,
            Err(e) => return Err((e.to_string(), capsule)),
        };
        let mut s = self.state.lock();
        if shared.owner.len() != s.queues.len() {
            return Err(("core count mismatch".into(), capsule));
        }
        s.reserved = reserved;
        s.shared = shared;
        for tok in capsule.tokens {
            let c = tok.core().index();
            s.queues[c].push_back(tok);
        }
        Ok(())
    }

    fn inspect(&self) -> Inspection {
        let s = self.state.lock();
        let mut grants: BTreeMap<u32, Vec<CoreId>> = BTreeMap::new();
        for c in 0..s.queues.len() {
            if let (Some(app), false) = (s.shared.owner[c], s.shared.pending[c]) {
                grants.entry(app).or_default().push(CoreId(c as u32));
            }
        }
        Inspection {
            tasks: s.shared.tasks.keys().map(|&t| (t, 0)).collect(),
            tokens_held: s.queues.iter().map(|q| q.len()).sum(),
            grants,
            requests: s.shared.requests.iter().copied().collect(),
        }
    }
}
