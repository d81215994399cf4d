//! Policy registration and live upgrade.
//!
//! Every policy call runs under the read side of its registration's
//! [`QuiesceLock`]. An upgrade takes the write side, which first stops new
//! readers and then waits for in-flight calls to finish, so the old instance
//! can export its state with nothing running against it.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use parking_lot::{Condvar, Mutex, RwLock};
use serde::Serialize;
use thiserror::Error;

use crate::api::{policy_call, FormatTag, MessageKind, SchedMessage, SchedResponse, SchedulerPolicy, TaskId};
use crate::hints::{HintDirection, HintError, HintHub, QueueId, UserEnd};
use crate::record::codec::{encode_message, encode_response};
use crate::record::{with_worker, EventKind, Recorder, CONTROL_WORKER};

#[derive(Default)]
struct QuiesceState {
    readers: u32,
    writer_waiting: bool,
    writer_held: bool,
}

/// Many-reader, one-writer gate. A waiting writer blocks new readers.
#[derive(Default)]
pub struct QuiesceLock {
    state: Mutex<QuiesceState>,
    cv: Condvar,
    held: AtomicBool,
}

pub struct QuiesceRead<'a>(&'a QuiesceLock);
pub struct QuiesceWrite<'a>(&'a QuiesceLock);

impl QuiesceLock {
    pub fn read(&self) -> QuiesceRead<'_> {
        let mut s = self.state.lock();
        while s.writer_waiting || s.writer_held {
            self.cv.wait(&mut s);
        }
        s.readers += 1;
        QuiesceRead(self)
    }

    pub fn write(&self) -> QuiesceWrite<'_> {
        let mut s = self.state.lock();
        while s.writer_waiting || s.writer_held {
            self.cv.wait(&mut s);
        }
        s.writer_waiting = true;
        while s.readers > 0 {
            self.cv.wait(&mut s);
        }
        s.writer_waiting = false;
        s.writer_held = true;
        self.held.store(true, Ordering::SeqCst);
        QuiesceWrite(self)
    }

    pub fn readers(&self) -> u32 {
        self.state.lock().readers
    }

    /// True while a writer holds the lock.
    pub fn is_held(&self) -> bool {
        self.held.load(Ordering::SeqCst)
    }
}

impl Drop for QuiesceRead<'_> {
    fn drop(&mut self) {
        let mut s = self.0.state.lock();
        s.readers -= 1;
        if s.readers == 0 {
            self.0.cv.notify_all();
        }
    }
}

impl Drop for QuiesceWrite<'_> {
    fn drop(&mut self) {
        let mut s = self.0.state.lock();
        s.writer_held = false;
        self.0.held.store(false, Ordering::SeqCst);
        self.0.cv.notify_all();
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("policy id {0} is already registered")]
    IdTaken(u32),
    #[error("policy {id} still has {attached} attached tasks")]
    Busy { id: u32, attached: usize },
    #[error("no policy registered under id {0}")]
    Unknown(u32),
    #[error("policy {0} no longer accepts new tasks")]
    Closed(u32),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("policy panicked while handling {kind}: {message}")]
pub struct PolicyPanic {
    pub kind: MessageKind,
    pub message: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum UpgradeError {
    #[error("no policy registered under id {0}")]
    Unknown(u32),
    #[error("capsule format mismatch: running {old:?}, replacement {new:?}")]
    FormatMismatch { old: FormatTag, new: FormatTag },
    #[error("hint record widths differ while hint queues are open")]
    HintFormatMismatch,
    #[error("old instance failed to export state: {0}")]
    PrepFailure(String),
    #[error("new instance rejected the capsule: {0}")]
    InitFailure(String),
    #[error("upgrades are not supported while recording")]
    RecordingActive,
    #[error(transparent)]
    Panic(#[from] PolicyPanic),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UpgradeReport {
    pub policy_id: u32,
    pub from_version: String,
    pub to_version: String,
    /// Wall-clock time the write side was held.
    pub blackout_ns: u64,
    pub tasks_before: Vec<TaskId>,
    pub tasks_after: Vec<TaskId>,
    pub vruntime_before: u128,
    pub vruntime_after: u128,
    pub tokens_before: usize,
    pub tokens_after: usize,
    /// Policy calls observed to start while the write side was held.
    pub calls_during_hold: u64,
}

impl UpgradeReport {
    pub fn tasks_conserved(&self) -> bool {
        self.tasks_before == self.tasks_after && self.tokens_before == self.tokens_after
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic".to_string()
    }
}

/// One registered policy id and the instance currently serving it.
pub struct Registration {
    id: u32,
    target: RwLock<Arc<dyn SchedulerPolicy>>,
    quiesce: QuiesceLock,
    attached: Mutex<BTreeSet<TaskId>>,
    closed: AtomicBool,
    recorder: Option<Arc<Recorder>>,
    in_flight: AtomicU32,
    calls_during_hold: AtomicU64,
}

impl Registration {
    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn policy(&self) -> Arc<dyn SchedulerPolicy> {
        self.target.read().clone()
    }

    pub fn quiesce(&self) -> &QuiesceLock {
        &self.quiesce
    }

    /// Delivers one message as `worker`, recording it if a recorder is set.
    pub fn call(&self, worker: u32, msg: SchedMessage) -> Result<SchedResponse, PolicyPanic> {
        let _read = self.quiesce.read();
        if self.quiesce.is_held() {
            self.calls_during_hold.fetch_add(1, Ordering::Relaxed);
        }
        self.in_flight.fetch_add(1, Ordering::SeqCst);
        let policy = self.policy();
        let kind = msg.kind();
        let result = with_worker(worker, || {
            if let Some(rec) = &self.recorder {
                let ev = if kind == MessageKind::ParseHint { EventKind::Hint } else { EventKind::Call };
                rec.push(worker, ev, 0, encode_message(&msg));
            }
            let out = catch_unwind(AssertUnwindSafe(|| policy_call(&*policy, msg)));
            if let (Some(rec), Ok(resp)) = (&self.recorder, &out) {
                rec.push(worker, EventKind::Response, 0, encode_response(resp));
            }
            out
        });
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result.map_err(|p| PolicyPanic { kind, message: panic_message(p) })
    }

    pub fn attach(&self, task: TaskId) -> Result<(), RegistryError> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(RegistryError::Closed(self.id));
        }
        self.attached.lock().insert(task);
        Ok(())
    }

    pub fn detach(&self, task: TaskId) {
        self.attached.lock().remove(&task);
    }

    pub fn attached(&self) -> Vec<TaskId> {
        self.attached.lock().iter().copied().collect()
    }

    /// Opens a hint queue for this policy. The policy sees `RegisterQueue`
    /// and may decline it.
    pub fn create_queue(
        &self,
        hub: &mut HintHub,
        direction: HintDirection,
        capacity: u32,
    ) -> Result<(QueueId, UserEnd), HintError> {
        let info = self.policy().info();
        let width = match direction {
            HintDirection::UserToSched => info.up_hint_width,
            HintDirection::SchedToUser => info.down_hint_width,
        };
        if width == 0 {
            return Err(HintError::PolicyRejected);
        }
        let pending = hub.prepare(self.id, direction, capacity, width)?;
        let msg = SchedMessage::RegisterQueue { queue: pending.id, direction, capacity };
        match self.call(CONTROL_WORKER, msg) {
            Ok(SchedResponse::Queue { accepted: true }) => Ok(hub.commit(pending)),
            _ => Err(HintError::PolicyRejected),
        }
    }

    pub fn close_queue(&self, hub: &mut HintHub, queue: QueueId) -> Result<(), HintError> {
        if hub.policy_of(queue) != Some(self.id) {
            return Err(HintError::UnknownQueue(queue));
        }
        self.call(CONTROL_WORKER, SchedMessage::UnregisterQueue { queue })
            .map_err(|_| HintError::UnknownQueue(queue))?;
        hub.remove(queue);
        Ok(())
    }
}

/// All registered policies, keyed by the id tasks refer to them by.
#[derive(Default)]
pub struct Registry {
    regs: RwLock<BTreeMap<u32, Arc<Registration>>>,
    recorder: Option<Arc<Recorder>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_recorder(recorder: Arc<Recorder>) -> Self {
        Registry { regs: RwLock::default(), recorder: Some(recorder) }
    }

    pub fn register(&self, id: u32, policy: Arc<dyn SchedulerPolicy>) -> Result<Arc<Registration>, RegistryError> {
        let mut regs = self.regs.write();
        if regs.contains_key(&id) {
            return Err(RegistryError::IdTaken(id));
        }
        let reg = Arc::new(Registration {
            id,
            target: RwLock::new(policy),
            quiesce: QuiesceLock::default(),
            attached: Mutex::default(),
            closed: AtomicBool::new(false),
            recorder: self.recorder.clone(),
            in_flight: AtomicU32::new(0),
            calls_during_hold: AtomicU64::new(0),
        });
        regs.insert(id, reg.clone());
        Ok(reg)
    }

    /// Refuses new attachments, drains in-flight calls, and removes the
    /// policy if no task is still attached.
    pub fn unregister(&self, id: u32) -> Result<(), RegistryError> {
        let reg = self.get(id).ok_or(RegistryError::Unknown(id))?;
        reg.closed.store(true, Ordering::SeqCst);
        let _drained = reg.quiesce.write();
        let attached = reg.attached.lock().len();
        if attached > 0 {
            return Err(RegistryError::Busy { id, attached });
        }
        self.regs.write().remove(&id);
        Ok(())
    }

    pub fn get(&self, id: u32) -> Option<Arc<Registration>> {
        self.regs.read().get(&id).cloned()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.regs.read().keys().copied().collect()
    }

    /// Replaces the instance serving `id` with `new`, handing state across in
    /// an [`UpgradeCapsule`](crate::api::UpgradeCapsule).
    ///
    /// `queues_open` says whether hint queues are live for this policy; they
    /// are carried over only if both versions declare the same record widths.
    pub fn live_upgrade(
        &self,
        id: u32,
        new: Arc<dyn SchedulerPolicy>,
        queues_open: bool,
    ) -> Result<UpgradeReport, UpgradeError> {
        if self.recorder.is_some() {
            return Err(UpgradeError::RecordingActive);
        }
        let reg = self.get(id).ok_or(UpgradeError::Unknown(id))?;
        let old = reg.policy();
        let (old_info, new_info) = (old.info(), new.info());
        if old_info.capsule_tag() != new_info.capsule_tag() {
            return Err(UpgradeError::FormatMismatch { old: old_info.capsule_tag(), new: new_info.capsule_tag() });
        }
        if queues_open
            && (old_info.up_hint_width != new_info.up_hint_width
                || old_info.down_hint_width != new_info.down_hint_width)
        {
            return Err(UpgradeError::HintFormatMismatch);
        }

        let hold = reg.quiesce.write();
        let start = Instant::now();
        let stray = reg.in_flight.load(Ordering::SeqCst) as u64;
        let before = old.inspect();
        let held_calls_start = reg.calls_during_hold.load(Ordering::Relaxed);

        let capsule = match catch_unwind(AssertUnwindSafe(|| old.reregister_prep())) {
            Ok(Ok(c)) => c,
            Ok(Err(msg)) => return Err(UpgradeError::PrepFailure(msg)),
            Err(p) => {
                return Err(PolicyPanic { kind: MessageKind::ReregisterPrep, message: panic_message(p) }.into())
            }
        };
        match catch_unwind(AssertUnwindSafe(|| new.reregister_init(capsule))) {
            Ok(Ok(())) => {}
            Ok(Err((msg, capsule))) => {
                // Hand the state back so the old instance keeps serving.
                let _ = old.reregister_init(capsule);
                return Err(UpgradeError::InitFailure(msg));
            }
            Err(p) => {
                return Err(PolicyPanic { kind: MessageKind::ReregisterInit, message: panic_message(p) }.into())
            }
        }
        *reg.target.write() = new.clone();
        let after = new.inspect();
        let calls_during_hold = reg.calls_during_hold.load(Ordering::Relaxed) - held_calls_start + stray;
        let blackout_ns = start.elapsed().as_nanos() as u64;
        drop(hold);

        Ok(UpgradeReport {
            policy_id: id,
            from_version: old_info.version,
            to_version: new_info.version,
            blackout_ns,
            tasks_before: before.tasks.keys().copied().collect(),
            tasks_after: after.tasks.keys().copied().collect(),
            vruntime_before: before.vruntime_sum(),
            vruntime_after: after.vruntime_sum(),
            tokens_before: before.tokens_held,
            tokens_after: after.tokens_held,
            calls_during_hold,
        })
    }
}
