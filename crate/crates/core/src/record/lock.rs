//! Locks handed to policies by the framework.
//!
//! Every piece of policy state that can be touched from more than one core
//! lives behind a [`TrackedMutex`]. While recording, acquisitions and
//! releases made inside a policy call are logged with the calling worker;
//! while replaying, each lock admits acquirers only in the logged order.

use std::cell::Cell;
use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, MutexGuard};

use super::{EventKind, Recorder};

/// Worker id used for framework work outside any per-core worker, such as
/// lock creation and upgrades.
pub const CONTROL_WORKER: u32 = u32::MAX;

thread_local! {
    static WORKER: Cell<Option<u32>> = const { Cell::new(None) };
}

/// Runs `f` as `worker`. Lock traffic is only recorded or gated inside this.
pub fn with_worker<R>(worker: u32, f: impl FnOnce() -> R) -> R {
    struct Restore(Option<u32>);
    impl Drop for Restore {
        fn drop(&mut self) {
            WORKER.with(|w| w.set(self.0));
        }
    }
    let _restore = Restore(WORKER.with(|w| w.replace(Some(worker))));
    f()
}

pub fn current_worker() -> Option<u32> {
    WORKER.with(|w| w.get())
}

enum Mode {
    Plain,
    Record(Arc<Recorder>),
    Replay(Arc<TurnTable>),
}

struct FactoryInner {
    next_id: AtomicU32,
    mode: Mode,
}

/// Source of every lock a policy uses. Lock ids are creation indices, so a
/// policy built the same way gets the same ids in every run.
#[derive(Clone)]
pub struct LockFactory {
    inner: Arc<FactoryInner>,
}

impl Default for LockFactory {
    fn default() -> Self {
        Self::plain()
    }
}

impl LockFactory {
    pub fn plain() -> Self {
        Self::with_mode(Mode::Plain)
    }

    pub fn recording(recorder: Arc<Recorder>) -> Self {
        Self::with_mode(Mode::Record(recorder))
    }

    pub(crate) fn replaying(table: Arc<TurnTable>) -> Self {
        Self::with_mode(Mode::Replay(table))
    }

    fn with_mode(mode: Mode) -> Self {
        LockFactory { inner: Arc::new(FactoryInner { next_id: AtomicU32::new(0), mode }) }
    }

    pub fn mutex<T>(&self, value: T) -> TrackedMutex<T> {
        let id = self.inner.next_id.fetch_add(1, Ordering::Relaxed);
        if let Mode::Record(rec) = &self.inner.mode {
            rec.push(CONTROL_WORKER, EventKind::LockCreate, id, Vec::new());
        }
        TrackedMutex { id, factory: self.inner.clone(), inner: Mutex::new(value) }
    }

    pub fn locks_created(&self) -> u32 {
        self.inner.next_id.load(Ordering::Relaxed)
    }
}

pub struct TrackedMutex<T> {
    id: u32,
    factory: Arc<FactoryInner>,
    inner: Mutex<T>,
}

impl<T> TrackedMutex<T> {
    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn lock(&self) -> TrackedGuard<'_, T> {
        let worker = current_worker();
        if let (Mode::Replay(table), Some(w)) = (&self.factory.mode, worker) {
            table.wait_turn(self.id, w);
        }
        let guard = self.inner.lock();
        match (&self.factory.mode, worker) {
            (Mode::Record(rec), Some(w)) => rec.push(w, EventKind::LockAcquire, self.id, Vec::new()),
            (Mode::Replay(table), Some(_)) => table.advance(self.id),
            _ => {}
        }
        TrackedGuard { guard, lock: self, worker }
    }
}

pub struct TrackedGuard<'a, T> {
    guard: MutexGuard<'a, T>,
    lock: &'a TrackedMutex<T>,
    worker: Option<u32>,
}

impl<T> Drop for TrackedGuard<'_, T> {
    fn drop(&mut self) {
        // Logged before the inner guard is released so the release precedes
        // the next acquisition in sequence order.
        if let (Mode::Record(rec), Some(w)) = (&self.lock.factory.mode, self.worker) {
            rec.push(w, EventKind::LockRelease, self.lock.id, Vec::new());
        }
    }
}

impl<T> Deref for TrackedGuard<'_, T> {
    type Target = T;
    fn deref(&self) -> &T {
        &self.guard
    }
}

impl<T> DerefMut for TrackedGuard<'_, T> {
    fn deref_mut(&mut self) -> &mut T {
        &mut self.guard
    }
}

/// Per-lock admission order used during replay.
pub(crate) struct TurnTable {
    schedules: Vec<Vec<u32>>,
    turns: Mutex<Vec<usize>>,
    cv: Condvar,
    abort: AtomicBool,
    deadlock: Mutex<Option<String>>,
    timeout: Duration,
    stall_threshold: Duration,
    stalls: AtomicU64,
}

pub(crate) const ABORT_PANIC: &str = "replay aborted";

impl TurnTable {
    pub(crate) fn new(schedules: Vec<Vec<u32>>, timeout: Duration, stall_threshold: Duration) -> Self {
        let n = schedules.len();
        TurnTable {
            schedules,
            turns: Mutex::new(vec![0; n]),
            cv: Condvar::new(),
            abort: AtomicBool::new(false),
            deadlock: Mutex::new(None),
            timeout,
            stall_threshold,
            stalls: AtomicU64::new(0),
        }
    }

    fn wait_turn(&self, lock: u32, worker: u32) {
        let Some(schedule) = self.schedules.get(lock as usize) else {
            return;
        };
        let start = Instant::now();
        let mut turns = self.turns.lock();
        loop {
            if self.abort.load(Ordering::Acquire) {
                drop(turns);
                panic!("{ABORT_PANIC}");
            }
            let turn = turns[lock as usize];
            if turn >= schedule.len() || schedule[turn] == worker {
                break;
            }
            let waited = start.elapsed();
            if waited >= self.timeout {
                let expected = schedule[turn];
                *self.deadlock.lock() = Some(format!(
                    "worker {worker} waited {} ms on lock {lock} whose turn {turn} belongs to worker {expected}",
                    waited.as_millis()
                ));
                drop(turns);
                self.abort();
                panic!("{ABORT_PANIC}");
            }
            let slice = (self.timeout - waited).min(Duration::from_millis(20));
            self.cv.wait_for(&mut turns, slice);
        }
        if start.elapsed() >= self.stall_threshold {
            self.stalls.fetch_add(1, Ordering::Relaxed);
        }
    }

    fn advance(&self, lock: u32) {
        let mut turns = self.turns.lock();
        if let Some(t) = turns.get_mut(lock as usize) {
            *t += 1;
        }
        drop(turns);
        self.cv.notify_all();
    }

    pub(crate) fn abort(&self) {
        self.abort.store(true, Ordering::Release);
        let _turns = self.turns.lock();
        self.cv.notify_all();
    }

    pub(crate) fn aborted(&self) -> bool {
        self.abort.load(Ordering::Acquire)
    }

    pub(crate) fn deadlock(&self) -> Option<String> {
        self.deadlock.lock().clone()
    }

    pub(crate) fn stalls(&self) -> u64 {
        self.stalls.load(Ordering::Relaxed)
    }
}
