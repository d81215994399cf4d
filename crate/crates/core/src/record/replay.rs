//! Re-running a recorded log against policy code, outside the simulator.
//!
//! Calls made by one recorded worker run one after another, each on its own
//! thread named after that worker. Calls from different workers run
//! concurrently; the only thing ordering them is that every policy lock
//! admits acquirers in the order the log saw. Each response is re-encoded
//! and compared byte-for-byte with the recorded one.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use parking_lot::Mutex;
use serde::Serialize;
use thiserror::Error;

use super::codec::{decode_message, decode_response, encode_response};
use super::log::LoadedLog;
use super::{with_worker, EventKind, LockFactory, TurnTable, ABORT_PANIC};
use crate::api::{policy_call, SchedulerPolicy};

pub const DEFAULT_DEADLOCK_TIMEOUT: Duration = Duration::from_secs(10);
/// Lock waits at least this long are reported as stalls.
pub const DEFAULT_STALL_THRESHOLD: Duration = Duration::from_secs(1);

#[derive(Debug, Clone, Copy)]
pub struct ReplayOptions {
    /// How long a worker may wait for its lock turn before replay gives up.
    pub deadlock_timeout: Duration,
    pub stall_threshold: Duration,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        ReplayOptions { deadlock_timeout: DEFAULT_DEADLOCK_TIMEOUT, stall_threshold: DEFAULT_STALL_THRESHOLD }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Mismatch {
    pub seq: u64,
    pub worker: u32,
    pub kind: String,
    pub expected: String,
    pub actual: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReplayReport {
    pub replayed: u64,
    /// Ordered by call sequence number.
    pub mismatches: Vec<Mismatch>,
    pub stalls: u64,
    pub drops: u64,
    /// Set when replay was abandoned because no worker could make progress.
    pub deadlock: Option<String>,
}

impl ReplayReport {
    pub fn first_mismatch(&self) -> Option<&Mismatch> {
        self.mismatches.first()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("log has {0} dropped events and cannot be replayed faithfully")]
    DropsPresent(u64),
    #[error("log is inconsistent: {0}")]
    BadLog(String),
    #[error("policy created {built} locks but the log recorded {logged}")]
    LockCountMismatch { built: u32, logged: u32 },
}

struct Job {
    seq: u64,
    payload: Vec<u8>,
    expected: Vec<u8>,
}

/// Replays `log` against a fresh policy from `build`, which must obtain all
/// its locks from the factory it is given.
pub fn replay<F>(log: &LoadedLog, build: F, opts: ReplayOptions) -> Result<ReplayReport, ReplayError>
where
    F: FnOnce(&LockFactory) -> Arc<dyn SchedulerPolicy>,
{
    if log.drops > 0 {
        return Err(ReplayError::DropsPresent(log.drops));
    }
    let chains = pair_calls(log)?;
    let nlocks = log.locks_created as usize;
    let mut schedules = vec![Vec::new(); nlocks];
    for (&lock, order) in &log.lock_orders {
        let slot = schedules
            .get_mut(lock as usize)
            .ok_or_else(|| ReplayError::BadLog(format!("lock {lock} acquired but never created")))?;
        *slot = order.clone();
    }
    let table = Arc::new(TurnTable::new(schedules, opts.deadlock_timeout, opts.stall_threshold));
    let factory = LockFactory::replaying(table.clone());
    let policy = build(&factory);
    if factory.locks_created() != log.locks_created {
        return Err(ReplayError::LockCountMismatch { built: factory.locks_created(), logged: log.locks_created });
    }

    let mismatches = Mutex::new(Vec::new());
    let replayed = std::sync::atomic::AtomicU64::new(0);
    thread::scope(|s| {
        for (worker, jobs) in chains {
            let (policy, table, mismatches, replayed) = (&policy, &table, &mismatches, &replayed);
            s.spawn(move || {
                for job in jobs {
                    if table.aborted() {
                        return;
                    }
                    let policy = policy.clone();
                    let outcome = thread::Builder::new()
                        .name(format!("replay-w{worker}-s{}", job.seq))
                        .spawn(move || run_call(&*policy, worker, &job).map(|m| (job.seq, m)))
                        .expect("spawn replay worker")
                        .join();
                    match outcome {
                        Ok(Some((_, m))) => {
                            replayed.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                            if let Some(m) = m {
                                mismatches.lock().push(m);
                            }
                        }
                        // Aborted while waiting for a lock turn.
                        Ok(None) | Err(_) => return,
                    }
                }
            });
        }
    });
    let mut mismatches = mismatches.into_inner();
    mismatches.sort_by_key(|m| m.seq);
    Ok(ReplayReport {
        replayed: replayed.into_inner(),
        mismatches,
        stalls: table.stalls(),
        drops: log.drops,
        deadlock: table.deadlock(),
    })
}

/// `None` if the call was cut short by a replay abort.
fn run_call(policy: &dyn SchedulerPolicy, worker: u32, job: &Job) -> Option<Option<Mismatch>> {
    let msg = match decode_message(&job.payload) {
        Ok(m) => m,
        Err(e) => {
            return Some(Some(Mismatch {
                seq: job.seq,
                worker,
                kind: "undecodable".into(),
                expected: String::new(),
                actual: e.to_string(),
            }))
        }
    };
    let kind = msg.kind().name().to_string();
    let out = with_worker(worker, || catch_unwind(AssertUnwindSafe(|| policy_call(policy, msg))));
    let actual = match out {
        Ok(resp) => encode_response(&resp),
        Err(p) => {
            let text = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_default();
            if text == ABORT_PANIC {
                return None;
            }
            return Some(Some(Mismatch { seq: job.seq, worker, kind, expected: show(&job.expected), actual: format!("panic: {text}") }));
        }
    };
    if actual == job.expected {
        return Some(None);
    }
    Some(Some(Mismatch { seq: job.seq, worker, kind, expected: show(&job.expected), actual: show(&actual) }))
}

fn show(bytes: &[u8]) -> String {
    match decode_response(bytes) {
        Ok(r) => format!("{r:?}"),
        Err(e) => format!("<{e}>"),
    }
}

/// Groups calls by worker, each with the response that followed it.
fn pair_calls(log: &LoadedLog) -> Result<BTreeMap<u32, Vec<Job>>, ReplayError> {
    let mut open: BTreeMap<u32, (u64, Vec<u8>)> = BTreeMap::new();
    let mut chains: BTreeMap<u32, Vec<Job>> = BTreeMap::new();
    for ev in &log.events {
        match ev.kind {
            EventKind::Call | EventKind::Hint => {
                if open.insert(ev.worker, (ev.seq, ev.payload.clone())).is_some() {
                    return Err(ReplayError::BadLog(format!("worker {} made call {} before a response", ev.worker, ev.seq)));
                }
            }
            EventKind::Response => {
                let (seq, payload) = open
                    .remove(&ev.worker)
                    .ok_or_else(|| ReplayError::BadLog(format!("response {} without a call", ev.seq)))?;
                chains.entry(ev.worker).or_default().push(Job { seq, payload, expected: ev.payload.clone() });
            }
            _ => {}
        }
    }
    if let Some((w, (seq, _))) = open.into_iter().next() {
        return Err(ReplayError::BadLog(format!("call {seq} by worker {w} has no response")));
    }
    Ok(chains)
}
