//! Bounded hint queues between workload code and a policy.
//!
//! Each queue carries fixed-width records in one direction and has exactly
//! one producer and one consumer; both ends are move-only handles. The ring
//! keeps monotonically increasing head/tail counters so that `tail - head`
//! is always the fill level.

use std::cell::UnsafeCell;
use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct QueueId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HintDirection {
    UserToSched,
    SchedToUser,
}

/// A hint record: plain bytes, laid out by the policy that declared it.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct HintRecord(Vec<u8>);

impl HintRecord {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        HintRecord(bytes)
    }

    /// Packs little-endian u64 words.
    pub fn from_words(words: &[u64]) -> Self {
        HintRecord(words.iter().flat_map(|w| w.to_le_bytes()).collect())
    }

    pub fn width(&self) -> usize {
        self.0.len()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn word(&self, index: usize) -> Option<u64> {
        let chunk = self.0.get(index * 8..index * 8 + 8)?;
        let mut buf = [0u8; 8];
        buf.copy_from_slice(chunk);
        Some(u64::from_le_bytes(buf))
    }
}

impl fmt::Debug for HintRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.len() % 8 == 0 {
            let words: Vec<u64> = (0..self.0.len() / 8).filter_map(|i| self.word(i)).collect();
            write!(f, "HintRecord{words:?}")
        } else {
            write!(f, "HintRecord({:02x?})", self.0)
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HintError {
    #[error("hint queue is full")]
    Full,
    #[error("record width {got} does not match declared width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("capacity {0} is not a non-zero power of two")]
    BadCapacity(u32),
    #[error("policy rejected the queue")]
    PolicyRejected,
    #[error("no policy registered under id {0}")]
    UnknownPolicy(u32),
    #[error("unknown queue {0:?}")]
    UnknownQueue(QueueId),
}

struct Ring {
    width: usize,
    mask: usize,
    cells: Box<[UnsafeCell<u8>]>,
    /// Next slot to read; written only by the consumer.
    head: AtomicUsize,
    /// Next slot to write; written only by the producer.
    tail: AtomicUsize,
}

// The producer only writes slots in [tail, head + capacity) and the consumer
// only reads slots in [head, tail); the Release/Acquire pairs on the counters
// order those accesses.
unsafe impl Sync for Ring {}
unsafe impl Send for Ring {}

impl Ring {
    fn capacity(&self) -> usize {
        self.mask + 1
    }

    fn slot(&self, index: usize) -> *mut u8 {
        let offset = (index & self.mask) * self.width;
        self.cells[offset].get()
    }
}

/// Producer end of a hint queue.
pub struct HintSender {
    ring: Arc<Ring>,
}

/// Consumer end of a hint queue.
pub struct HintReceiver {
    ring: Arc<Ring>,
}

/// Creates a queue of `capacity` records of `width` bytes each.
pub fn hint_channel(capacity: u32, width: usize) -> Result<(HintSender, HintReceiver), HintError> {
    if capacity == 0 || !capacity.is_power_of_two() {
        return Err(HintError::BadCapacity(capacity));
    }
    let cells = (0..capacity as usize * width.max(1)).map(|_| UnsafeCell::new(0u8)).collect();
    let ring = Arc::new(Ring {
        width: width.max(1),
        mask: capacity as usize - 1,
        cells,
        head: AtomicUsize::new(0),
        tail: AtomicUsize::new(0),
    });
    Ok((HintSender { ring: ring.clone() }, HintReceiver { ring }))
}

impl HintSender {
    pub fn send(&mut self, record: &HintRecord) -> Result<(), HintError> {
        let ring = &*self.ring;
        if record.width() != ring.width {
            return Err(HintError::WidthMismatch { expected: ring.width, got: record.width() });
        }
        let tail = ring.tail.load(Ordering::Relaxed);
        let head = ring.head.load(Ordering::Acquire);
        if tail.wrapping_sub(head) == ring.capacity() {
            return Err(HintError::Full);
        }
        unsafe {
            std::ptr::copy_nonoverlapping(record.as_bytes().as_ptr(), ring.slot(tail), ring.width);
        }
        ring.tail.store(tail.wrapping_add(1), Ordering::Release);
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.ring.width
    }
}

impl HintReceiver {
    pub fn recv(&mut self) -> Option<HintRecord> {
        let ring = &*self.ring;
        let head = ring.head.load(Ordering::Relaxed);
        let tail = ring.tail.load(Ordering::Acquire);
        if head == tail {
            return None;
        }
        let mut buf = vec![0u8; ring.width];
        unsafe {
            std::ptr::copy_nonoverlapping(ring.slot(head), buf.as_mut_ptr(), ring.width);
        }
        ring.head.store(head.wrapping_add(1), Ordering::Release);
        Some(HintRecord(buf))
    }

    pub fn len(&self) -> usize {
        let tail = self.ring.tail.load(Ordering::Acquire);
        tail.wrapping_sub(self.ring.head.load(Ordering::Relaxed))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// User-side end of a queue returned by queue creation.
pub enum UserEnd {
    Sender(HintSender),
    Receiver(HintReceiver),
}

impl UserEnd {
    pub fn into_sender(self) -> Option<HintSender> {
        match self {
            UserEnd::Sender(s) => Some(s),
            UserEnd::Receiver(_) => None,
        }
    }

    pub fn into_receiver(self) -> Option<HintReceiver> {
        match self {
            UserEnd::Receiver(r) => Some(r),
            UserEnd::Sender(_) => None,
        }
    }
}

enum FrameworkEnd {
    Drain(HintReceiver),
    Push(HintSender),
}

struct QueueEntry {
    policy: u32,
    direction: HintDirection,
    end: FrameworkEnd,
}

/// Framework-held ends of every live queue.
///
/// User-to-scheduler queues are drained here at safe points; records a
/// policy emits are pushed onto its scheduler-to-user queues from here.
#[derive(Default)]
pub struct HintHub {
    next_id: u32,
    queues: BTreeMap<QueueId, QueueEntry>,
    /// Outbound records that found their queue full.
    pub overflowed: u64,
}

/// Upper bound on hints delivered for one queue per safe point.
pub const DRAIN_BATCH: usize = 32;

impl HintHub {
    pub fn new() -> Self {
        Self::default()
    }

    /// Allocates an id and the two ends; the caller delivers `RegisterQueue`
    /// and calls [`HintHub::commit`] or drops the pending queue.
    pub fn prepare(
        &mut self,
        policy: u32,
        direction: HintDirection,
        capacity: u32,
        width: usize,
    ) -> Result<PendingQueue, HintError> {
        let (tx, rx) = hint_channel(capacity, width)?;
        let id = QueueId(self.next_id);
        self.next_id += 1;
        let (framework, user) = match direction {
            HintDirection::UserToSched => (FrameworkEnd::Drain(rx), UserEnd::Sender(tx)),
            HintDirection::SchedToUser => (FrameworkEnd::Push(tx), UserEnd::Receiver(rx)),
        };
        Ok(PendingQueue { id, policy, direction, framework, user })
    }

    pub fn commit(&mut self, pending: PendingQueue) -> (QueueId, UserEnd) {
        let PendingQueue { id, policy, direction, framework, user } = pending;
        self.queues.insert(id, QueueEntry { policy, direction, end: framework });
        (id, user)
    }

    pub fn remove(&mut self, queue: QueueId) -> bool {
        self.queues.remove(&queue).is_some()
    }

    pub fn queues_of(&self, policy: u32) -> Vec<(QueueId, HintDirection)> {
        self.queues
            .iter()
            .filter(|(_, q)| q.policy == policy)
            .map(|(id, q)| (*id, q.direction))
            .collect()
    }

    pub fn policy_of(&self, queue: QueueId) -> Option<u32> {
        self.queues.get(&queue).map(|q| q.policy)
    }

    /// Pops up to [`DRAIN_BATCH`] records from each user-to-scheduler queue,
    /// in queue id order.
    pub fn drain(&mut self) -> Vec<(u32, QueueId, Vec<HintRecord>)> {
        let mut out = Vec::new();
        for (id, entry) in self.queues.iter_mut() {
            if let FrameworkEnd::Drain(rx) = &mut entry.end {
                let mut batch = Vec::new();
                while batch.len() < DRAIN_BATCH {
                    match rx.recv() {
                        Some(r) => batch.push(r),
                        None => break,
                    }
                }
                if !batch.is_empty() {
                    out.push((entry.policy, *id, batch));
                }
            }
        }
        out
    }

    pub fn push_outbound(&mut self, queue: QueueId, record: &HintRecord) -> Result<(), HintError> {
        match self.queues.get_mut(&queue).map(|q| &mut q.end) {
            Some(FrameworkEnd::Push(tx)) => {
                let res = tx.send(record);
                if res == Err(HintError::Full) {
                    self.overflowed += 1;
                }
                res
            }
            _ => Err(HintError::UnknownQueue(queue)),
        }
    }
}

pub struct PendingQueue {
    pub id: QueueId,
    pub policy: u32,
    pub direction: HintDirection,
    framework: FrameworkEnd,
    user: UserEnd,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recv_on_empty_is_none() {
        let (_tx, mut rx) = hint_channel(4, 8).unwrap();
        assert!(rx.recv().is_none());
    }

    #[test]
    fn fifo_order() {
        let (mut tx, mut rx) = hint_channel(4, 8).unwrap();
        for v in [1u64, 2, 3] {
            tx.send(&HintRecord::from_words(&[v])).unwrap();
        }
        let got: Vec<u64> = std::iter::from_fn(|| rx.recv()).map(|r| r.word(0).unwrap()).collect();
        assert_eq!(got, vec![1, 2, 3]);
    }

    #[test]
    fn full_queue_rejects() {
        let (mut tx, _rx) = hint_channel(4, 8).unwrap();
        for v in 0..4u64 {
            tx.send(&HintRecord::from_words(&[v])).unwrap();
        }
        assert_eq!(tx.send(&HintRecord::from_words(&[9])), Err(HintError::Full));
    }

    #[test]
    fn width_is_enforced() {
        let (mut tx, _rx) = hint_channel(4, 16).unwrap();
        assert_eq!(
            tx.send(&HintRecord::from_words(&[1])),
            Err(HintError::WidthMismatch { expected: 16, got: 8 })
        );
    }

    #[test]
    fn capacity_must_be_power_of_two() {
        assert_eq!(hint_channel(6, 8).err(), Some(HintError::BadCapacity(6)));
        assert_eq!(hint_channel(0, 8).err(), Some(HintError::BadCapacity(0)));
    }

    #[test]
    fn hub_drains_in_batches() {
        let mut hub = HintHub::new();
        let pending = hub.prepare(1, HintDirection::UserToSched, 64, 8).unwrap();
        let (id, user) = hub.commit(pending);
        let mut tx = user.into_sender().unwrap();
        for v in 0..40u64 {
            tx.send(&HintRecord::from_words(&[v])).unwrap();
        }
        let first = hub.drain();
        assert_eq!(first.len(), 1);
        assert_eq!(first[0].1, id);
        assert_eq!(first[0].2.len(), DRAIN_BATCH);
        let second = hub.drain();
        assert_eq!(second[0].2.len(), 8);
        assert!(hub.drain().is_empty());
    }
}
