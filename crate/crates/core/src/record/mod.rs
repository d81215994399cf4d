//! Recording policy traffic and replaying it.
//!
//! The framework pushes one [`RecordEvent`] per policy call, response, hint
//! and lock operation into a bounded ring; a drainer thread writes them to a
//! log asynchronously. If the ring is full the event is dropped and counted,
//! and a log with drops is refused by [`replay::replay`].

pub mod codec;
mod lock;
pub mod log;
pub mod replay;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam::queue::{ArrayQueue, SegQueue};
use serde::{Deserialize, Serialize};

pub use lock::{current_worker, with_worker, LockFactory, TrackedGuard, TrackedMutex, CONTROL_WORKER};
pub(crate) use lock::{TurnTable, ABORT_PANIC};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum EventKind {
    Call = 1,
    Response = 2,
    /// A `parse_hint` call; answered by a `Response` like any call.
    Hint = 3,
    LockCreate = 4,
    LockAcquire = 5,
    LockRelease = 6,
}

impl EventKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => EventKind::Call,
            2 => EventKind::Response,
            3 => EventKind::Hint,
            4 => EventKind::LockCreate,
            5 => EventKind::LockAcquire,
            6 => EventKind::LockRelease,
            _ => return None,
        })
    }

    pub fn is_call(self) -> bool {
        matches!(self, EventKind::Call | EventKind::Hint)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordEvent {
    pub seq: u64,
    pub worker: u32,
    pub kind: EventKind,
    /// Lock id for lock events, 0 otherwise.
    pub lock: u32,
    /// Encoded message or response; empty for lock events.
    pub payload: Vec<u8>,
}

/// Bounded transport from the scheduling path to the drainer.
pub struct Recorder {
    ring: ArrayQueue<RecordEvent>,
    dropped: SegQueue<u64>,
    seq: AtomicU64,
    drops: AtomicU64,
}

pub const DEFAULT_RING_CAPACITY: usize = 1 << 16;

impl Recorder {
    pub fn new(capacity: usize) -> Arc<Self> {
        Arc::new(Recorder {
            ring: ArrayQueue::new(capacity.max(1)),
            dropped: SegQueue::new(),
            seq: AtomicU64::new(0),
            drops: AtomicU64::new(0),
        })
    }

    /// Never blocks: a full ring drops the event.
    pub fn push(&self, worker: u32, kind: EventKind, lock: u32, payload: Vec<u8>) {
        let seq = self.seq.fetch_add(1, Ordering::AcqRel);
        if self.ring.push(RecordEvent { seq, worker, kind, lock, payload }).is_err() {
            self.drops.fetch_add(1, Ordering::Relaxed);
            self.dropped.push(seq);
        }
    }

    pub fn pop(&self) -> Option<RecordEvent> {
        self.ring.pop()
    }

    pub fn drops(&self) -> u64 {
        self.drops.load(Ordering::Relaxed)
    }

    pub fn pushed(&self) -> u64 {
        self.seq.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LogSummary {
    pub events: u64,
    pub drops: u64,
}

/// Background writer emptying a [`Recorder`] into a log.
pub struct Drainer {
    stop: Arc<AtomicBool>,
    handle: JoinHandle<io::Result<LogSummary>>,
}

impl Drainer {
    pub fn spawn<W: Write + Send + 'static>(recorder: Arc<Recorder>, mut out: log::LogWriter<W>) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = std::thread::Builder::new()
            .name("record-drainer".into())
            .spawn(move || {
                let mut reorder = Reorder::default();
                loop {
                    let finishing = flag.load(Ordering::Acquire);
                    let mut got = false;
                    while let Some(ev) = recorder.pop() {
                        reorder.pending.insert(ev.seq, ev);
                        got = true;
                    }
                    while let Some(seq) = recorder.dropped.pop() {
                        reorder.dropped.insert(seq);
                    }
                    reorder.flush(&mut out)?;
                    if finishing {
                        // Producers are gone; whatever is left is complete.
                        for (_, ev) in std::mem::take(&mut reorder.pending) {
                            out.write_event(&ev)?;
                            reorder.written += 1;
                        }
                        break;
                    }
                    if !got {
                        std::thread::sleep(Duration::from_micros(200));
                    }
                }
                let drops = recorder.drops();
                out.finish(drops, reorder.written)?;
                Ok(LogSummary { events: reorder.written, drops })
            })
            .expect("spawn drainer");
        Drainer { stop, handle }
    }

    /// Call once every producer has stopped pushing.
    pub fn finish(self) -> io::Result<LogSummary> {
        self.stop.store(true, Ordering::Release);
        self.handle.join().unwrap_or_else(|_| Err(io::Error::other("drainer panicked")))
    }
}

/// Sequence numbers are taken before the ring push, so events can arrive
/// slightly out of order; they are written strictly by seq.
#[derive(Default)]
struct Reorder {
    next: u64,
    written: u64,
    pending: BTreeMap<u64, RecordEvent>,
    dropped: BTreeSet<u64>,
}

impl Reorder {
    fn flush<W: Write>(&mut self, out: &mut log::LogWriter<W>) -> io::Result<()> {
        loop {
            if self.dropped.remove(&self.next) {
                self.next += 1;
            } else if let Some(ev) = self.pending.remove(&self.next) {
                out.write_event(&ev)?;
                self.written += 1;
                self.next += 1;
            } else {
                return Ok(());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_ring_counts_drops_without_blocking() {
        let rec = Recorder::new(8);
        for _ in 0..20 {
            rec.push(0, EventKind::Call, 0, vec![1]);
        }
        assert_eq!(rec.drops(), 12);
        assert_eq!(std::iter::from_fn(|| rec.pop()).count(), 8);
    }

    #[test]
    fn drainer_writes_in_seq_order() {
        let rec = Recorder::new(4096);
        let header = log::LogHeader { policy: "wfq".into(), num_cores: 1, seed: 0, mode: log::LogMode::VirtualTime };
        let buf = log::SharedBuf::default();
        let drainer = Drainer::spawn(rec.clone(), log::LogWriter::new(buf.clone(), &header).unwrap());
        let handles: Vec<_> = (0..4)
            .map(|w| {
                let rec = rec.clone();
                std::thread::spawn(move || {
                    for _ in 0..500 {
                        rec.push(w, EventKind::Call, 0, vec![w as u8]);
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        let summary = drainer.finish().unwrap();
        assert_eq!(summary, LogSummary { events: 2000, drops: 0 });
        let loaded = log::parse_log(&buf.bytes()).unwrap();
        let seqs: Vec<u64> = loaded.events.iter().map(|e| e.seq).collect();
        assert_eq!(seqs, (0..2000).collect::<Vec<_>>());
    }
}
