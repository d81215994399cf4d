// Shared by several test targets; each uses a different subset.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use schedkit::api::{
    BalanceMove, Inspection, Pick, PolicyInfo, SelectRq, TaskAttrs, TickDecision, UpgradeCapsule,
};
use schedkit::hints::{HintDirection, HintRecord, QueueId};
use schedkit::record::{LockFactory, TrackedMutex};
use schedkit::{CoreId, Schedulable, SchedulerPolicy, TaskId};

/// A policy that misbehaves on purpose: it picks tokens queued for other
/// cores, keeps superseded tokens after migrations, nominates bogus balance
/// moves and places tasks on cores that do not exist.
pub struct FaultyPolicy {
    num_cores: u32,
    state: TrackedMutex<Faulty>,
}

struct Faulty {
    rng: ChaCha8Rng,
    pool: Vec<Schedulable>,
    known: BTreeSet<TaskId>,
}

impl FaultyPolicy {
    pub fn new(num_cores: u32, seed: u64, locks: &LockFactory) -> Self {
        let state = Faulty { rng: ChaCha8Rng::seed_from_u64(seed), pool: Vec::new(), known: BTreeSet::new() };
        FaultyPolicy { num_cores, state: locks.mutex(state) }
    }
}

impl SchedulerPolicy for FaultyPolicy {
    fn info(&self) -> PolicyInfo {
        PolicyInfo {
            name: "faulty".into(),
            version: "0".into(),
            capsule_format: "faulty/0".into(),
            up_hint_width: 0,
            down_hint_width: 0,
        }
    }

    fn pick_next_task(&self, core: CoreId, current: Option<Schedulable>, _delta: u64) -> Pick {
        let mut s = self.state.lock();
        if let Some(t) = current {
            s.pool.push(t);
        }
        if s.pool.is_empty() {
            return Pick::idle();
        }
        let i = if s.rng.random_bool(0.3) {
            let n = s.pool.len();
            s.rng.random_range(0..n)
        } else {
            match s.pool.iter().position(|t| t.core() == core) {
                Some(i) => i,
                None => return Pick::idle(),
            }
        };
        let tok = s.pool.swap_remove(i);
        Pick::run(tok).with_timer(20_000)
    }

    fn pnt_err(&self, core: CoreId, token: Schedulable) {
        let mut s = self.state.lock();
        // A token refused on its own core is stale; anything else is still
        // good somewhere.
        if token.core() != core || s.rng.random_bool(0.2) {
            s.pool.push(token);
        }
    }

    fn task_new(&self, task: TaskId, _attrs: TaskAttrs, token: Schedulable) {
        let mut s = self.state.lock();
        s.known.insert(task);
        s.pool.push(token);
    }

    fn task_wakeup(&self, _task: TaskId, token: Schedulable) {
        self.state.lock().pool.push(token);
    }

    fn task_blocked(&self, _task: TaskId, _core: CoreId, _delta: u64) {}

    fn task_dead(&self, task: TaskId, _core: CoreId, _delta: u64) {
        self.state.lock().known.remove(&task);
    }

    fn task_tick(&self, _core: CoreId, _task: TaskId, _delta: u64) -> TickDecision {
        let mut s = self.state.lock();
        TickDecision { preempt: s.rng.random_bool(0.5), timer_ns: Some(20_000) }
    }

    fn select_task_rq(&self, _req: SelectRq) -> CoreId {
        let mut s = self.state.lock();
        CoreId(s.rng.random_range(0..self.num_cores + 1))
    }

    fn migrate_task_rq(&self, task: TaskId, _from: CoreId, token: Schedulable) -> Option<Schedulable> {
        let mut s = self.state.lock();
        s.pool.push(token);
        if s.rng.random_bool(0.5) {
            // Keep the superseded token around and present it later.
            return None;
        }
        let pos = s.pool.iter().position(|t| t.task() == task)?;
        Some(s.pool.swap_remove(pos))
    }

    fn balance(&self, core: CoreId, _busy: bool) -> Option<BalanceMove> {
        let mut s = self.state.lock();
        if s.pool.is_empty() || !s.rng.random_bool(0.3) {
            return None;
        }
        let n = s.pool.len();
        let i = s.rng.random_range(0..n);
        let (task, from) = (s.pool[i].task(), s.pool[i].core());
        Some(BalanceMove { task, from: if s.rng.random_bool(0.1) { core } else { from } })
    }

    fn balance_err(&self, _core: CoreId, _task: TaskId, token: Option<Schedulable>) {
        if let Some(t) = token {
            self.state.lock().pool.push(t);
        }
    }

    fn register_queue(&self, _q: QueueId, _d: HintDirection, _c: u32) -> bool {
        false
    }

    fn enter_queue(&self, _q: QueueId, _pending: u32) {}

    fn unregister_queue(&self, _q: QueueId) {}

    fn parse_hint(&self, _q: QueueId, _h: &HintRecord) -> Vec<(QueueId, HintRecord)> {
        Vec::new()
    }

    fn reregister_prep(&self) -> Result<UpgradeCapsule, String> {
        Err("not upgradable".into())
    }

    fn reregister_init(&self, capsule: UpgradeCapsule) -> Result<(), (String, UpgradeCapsule)> {
        Err(("not upgradable".into(), capsule))
    }

    fn inspect(&self) -> Inspection {
        let s = self.state.lock();
        Inspection { tasks: s.known.iter().map(|&t| (t, 0)).collect(), tokens_held: s.pool.len(), ..Default::default() }
    }
}

/// One CPU-bound task for [`fair_queue_oracle`].
#[derive(Debug, Clone, Copy)]
pub struct OracleTask {
    pub arrival_us: u64,
    pub compute_us: u64,
    pub nice: i8,
}

const TICK_US: u64 = 1_000;
const PERIOD_US: u64 = 6_000;
const GRANULARITY_US: u64 = 750;

/// Brute-force single-core fair queueing, advanced one microsecond at a
/// time. Returns `(time_ns, task_id)` for every dispatch, task ids counting
/// from 1 in input order.
///
/// Rules modelled: a task's virtual time grows by its runtime times
/// 1.25^nice, charged when the periodic 1 ms tick or a slice timer reads the
/// running task's clock and when it is switched out. The waiting task with
/// the smallest (virtual time, id) runs next. With k tasks runnable a task
/// may run for max(6 ms, 0.75 ms * k) / k, at least 0.75 ms, before a tick
/// or timer switches it out; a timer is armed for the remainder of that
/// allowance whenever someone is waiting. A newcomer starts at the smallest
/// virtual time on the core and, if that undercuts the running task's
/// charged time, forces a switch at the next tick or timer.
pub fn fair_queue_oracle(tasks: &[OracleTask]) -> Vec<(u64, u64)> {
    #[derive(Clone, Copy)]
    struct T {
        vt: u64,
        left_us: u64,
        arrived: bool,
        done: bool,
    }
    let scaled = |us: u64, nice: i8| ((us * 1000) as f64 * 1.25f64.powi(nice as i32)).round() as u64;
    let allowance = |k: u64| (PERIOD_US.max(GRANULARITY_US * k) / k).max(GRANULARITY_US);

    let mut ts: Vec<T> =
        tasks.iter().map(|t| T { vt: 0, left_us: t.compute_us, arrived: false, done: false }).collect();
    let mut waiting: BTreeSet<(u64, usize)> = BTreeSet::new();
    let mut running: Option<usize> = None;
    // Runtime of the running task not yet charged to its virtual time.
    let mut unbilled_us = 0u64;
    // Runtime the policy has seen since the last switch.
    let mut seen_us = 0u64;
    let mut must_switch = false;
    let mut timer: Option<u64> = None;
    let mut out = Vec::new();

    let mut now = 0u64;
    loop {
        if now > 0 {
            if let Some(r) = running {
                ts[r].left_us -= 1;
                unbilled_us += 1;
            }
        }
        let mut dispatch = false;
        let mut preempt = false;

        // The running task finishing comes first.
        if let Some(r) = running {
            if ts[r].left_us == 0 {
                ts[r].done = true;
                running = None;
                unbilled_us = 0;
                timer = None;
                dispatch = true;
            }
        }
        let check = |running: Option<usize>,
                         ts: &mut Vec<T>,
                         unbilled_us: &mut u64,
                         seen_us: &mut u64,
                         timer: &mut Option<u64>,
                         preempt: &mut bool| {
            let Some(r) = running else {
                return;
            };
            if *preempt {
                return;
            }
            ts[r].vt += scaled(*unbilled_us, tasks[r].nice);
            *seen_us += *unbilled_us;
            *unbilled_us = 0;
            if waiting.is_empty() {
                return;
            }
            let a = allowance(waiting.len() as u64 + 1);
            if must_switch || *seen_us >= a {
                *preempt = true;
            } else {
                *timer = Some(now + a - *seen_us);
            }
        };
        if timer == Some(now) {
            timer = None;
            check(running, &mut ts, &mut unbilled_us, &mut seen_us, &mut timer, &mut preempt);
        }
        if now > 0 && now % TICK_US == 0 {
            if running.is_none() {
                dispatch = true;
            }
            check(running, &mut ts, &mut unbilled_us, &mut seen_us, &mut timer, &mut preempt);
        }
        for (i, t) in tasks.iter().enumerate() {
            if t.arrival_us == now {
                let cur = running.map(|r| ts[r].vt);
                let head = waiting.first().map(|&(v, _)| v);
                let base = match (cur, head) {
                    (Some(a), Some(b)) => a.min(b),
                    (a, b) => a.or(b).unwrap_or(0),
                };
                ts[i].vt = base;
                ts[i].arrived = true;
                if cur.is_some_and(|c| base < c) {
                    must_switch = true;
                }
                waiting.insert((base, i));
                if running.is_none() {
                    dispatch = true;
                }
            }
        }

        if preempt || (dispatch && running.is_none()) {
            let prev = running.take();
            if let Some(p) = prev {
                ts[p].vt += scaled(unbilled_us, tasks[p].nice);
                unbilled_us = 0;
                waiting.insert((ts[p].vt, p));
            }
            must_switch = false;
            seen_us = 0;
            timer = None;
            if let Some((_, next)) = waiting.pop_first() {
                running = Some(next);
                if prev != Some(next) {
                    out.push((now * 1000, next as u64 + 1));
                }
                if !waiting.is_empty() {
                    timer = Some(now + allowance(waiting.len() as u64 + 1));
                }
            }
        }

        if ts.iter().all(|t| t.done) {
            return out;
        }
        now += 1;
    }
}
