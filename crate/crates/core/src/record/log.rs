//! On-disk log layout.
//!
//! ```text
//! magic "SKRRLOG\0" | version u16 | header_len u32 | header
//! { record_len u32 | seq u64 | worker u32 | kind u8 | lock u32 | payload }*
//! footer record: kind 0xFF, payload = drops u64 | event_count u64
//! ```
//!
//! All integers are little-endian. A log without a footer is truncated.

use std::collections::BTreeMap;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::Serialize;
use thiserror::Error;

use super::codec::{Dec, Enc};
use super::{EventKind, RecordEvent};

pub const MAGIC: &[u8; 8] = b"SKRRLOG\0";
pub const VERSION: u16 = 1;
const FOOTER_KIND: u8 = 0xFF;
const RECORD_FIXED: usize = 8 + 4 + 1 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LogMode {
    VirtualTime,
    Concurrent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LogHeader {
    /// Policy name as accepted by [`crate::policies::PolicyKind`].
    pub policy: String,
    pub num_cores: u32,
    pub seed: u64,
    pub mode: LogMode,
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("corrupt log at byte {offset}: {reason}")]
    CorruptLog { offset: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn corrupt(offset: usize, reason: impl Into<String>) -> LogError {
    LogError::CorruptLog { offset, reason: reason.into() }
}

pub struct LogWriter<W: Write> {
    out: BufWriter<W>,
}

impl<W: Write> LogWriter<W> {
    pub fn new(out: W, header: &LogHeader) -> io::Result<Self> {
        let mut out = BufWriter::new(out);
        let mut h = Enc::default();
        h.str(&header.policy);
        h.u32(header.num_cores);
        h.u64(header.seed);
        h.u8(match header.mode {
            LogMode::VirtualTime => 0,
            LogMode::Concurrent => 1,
        });
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(h.0.len() as u32).to_le_bytes())?;
        out.write_all(&h.0)?;
        Ok(LogWriter { out })
    }

    fn write_raw(&mut self, seq: u64, worker: u32, kind: u8, lock: u32, payload: &[u8]) -> io::Result<()> {
        let len = (RECORD_FIXED + payload.len()) as u32;
        self.out.write_all(&len.to_le_bytes())?;
        self.out.write_all(&seq.to_le_bytes())?;
        self.out.write_all(&worker.to_le_bytes())?;
        self.out.write_all(&[kind])?;
        self.out.write_all(&lock.to_le_bytes())?;
        self.out.write_all(payload)
    }

    pub fn write_event(&mut self, ev: &RecordEvent) -> io::Result<()> {
        self.write_raw(ev.seq, ev.worker, ev.kind as u8, ev.lock, &ev.payload)
    }

    pub fn finish(mut self, drops: u64, count: u64) -> io::Result<W> {
        let mut p = Enc::default();
        p.u64(drops);
        p.u64(count);
        self.write_raw(u64::MAX, 0, FOOTER_KIND, 0, &p.0)?;
        self.out.into_inner().map_err(|e| e.into_error())
    }
}

/// A cloneable in-memory sink, for logs that never touch disk.
#[derive(Clone, Default)]
pub struct SharedBuf(Arc<Mutex<Vec<u8>>>);

impl SharedBuf {
    pub fn bytes(&self) -> Vec<u8> {
        self.0.lock().clone()
    }
}

impl Write for SharedBuf {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.lock().extend_from_slice(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LoadedLog {
    pub header: LogHeader,
    pub events: Vec<RecordEvent>,
    /// Acquiring worker ids per lock, in acquisition order.
    pub lock_orders: BTreeMap<u32, Vec<u32>>,
    pub locks_created: u32,
    pub drops: u64,
}

impl LoadedLog {
    pub fn calls(&self) -> impl Iterator<Item = &RecordEvent> {
        self.events.iter().filter(|e| e.kind.is_call())
    }
}

pub fn load_log(path: &Path) -> Result<LoadedLog, LogError> {
    parse_log(&std::fs::read(path)?)
}

pub fn parse_log(bytes: &[u8]) -> Result<LoadedLog, LogError> {
    if bytes.len() < MAGIC.len() + 2 + 4 || &bytes[..8] != MAGIC {
        return Err(corrupt(0, "missing magic"));
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != VERSION {
        return Err(corrupt(8, format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let header_end = 14 + header_len;
    if bytes.len() < header_end {
        return Err(corrupt(14, "header truncated"));
    }
    let mut h = Dec::new(&bytes[14..header_end]);
    let header = (|| {
        let policy = h.str()?;
        let num_cores = h.u32()?;
        let seed = h.u64()?;
        let mode = match h.u8()? {
            0 => LogMode::VirtualTime,
            _ => LogMode::Concurrent,
        };
        h.end()?;
        Ok::<_, super::codec::CodecError>(LogHeader { policy, num_cores, seed, mode })
    })()
    .map_err(|e| corrupt(14 + h.pos(), e.to_string()))?;

    let mut events = Vec::new();
    let mut lock_orders: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    let mut locks_created = 0;
    let mut pos = header_end;
    let mut last_seq = None;
    loop {
        if pos == bytes.len() {
            return Err(corrupt(pos, "missing footer"));
        }
        if bytes.len() - pos < 4 {
            return Err(corrupt(pos, "record length truncated"));
        }
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        if len < RECORD_FIXED || bytes.len() - pos - 4 < len {
            return Err(corrupt(pos, "record truncated"));
        }
        let rec = &bytes[pos + 4..pos + 4 + len];
        let seq = u64::from_le_bytes(rec[0..8].try_into().unwrap());
        let worker = u32::from_le_bytes(rec[8..12].try_into().unwrap());
        let kind_byte = rec[12];
        let lock = u32::from_le_bytes(rec[13..17].try_into().unwrap());
        let payload = &rec[RECORD_FIXED..];
        if kind_byte == FOOTER_KIND {
            if payload.len() != 16 {
                return Err(corrupt(pos, "bad footer"));
            }
            let drops = u64::from_le_bytes(payload[0..8].try_into().unwrap());
            let count = u64::from_le_bytes(payload[8..16].try_into().unwrap());
            if count != events.len() as u64 {
                return Err(corrupt(pos, format!("footer counts {count} events, found {}", events.len())));
            }
            if pos + 4 + len != bytes.len() {
                return Err(corrupt(pos + 4 + len, "data after footer"));
            }
            return Ok(LoadedLog { header, events, lock_orders, locks_created, drops });
        }
        let kind = EventKind::from_u8(kind_byte).ok_or_else(|| corrupt(pos, format!("bad kind {kind_byte}")))?;
        if last_seq.is_some_and(|l| seq <= l) {
            return Err(corrupt(pos, "sequence numbers not increasing"));
        }
        last_seq = Some(seq);
        match kind {
            EventKind::LockCreate => locks_created += 1,
            EventKind::LockAcquire => lock_orders.entry(lock).or_default().push(worker),
            _ => {}
        }
        events.push(RecordEvent { seq, worker, kind, lock, payload: payload.to_vec() });
        pos += 4 + len;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> LogHeader {
        LogHeader { policy: "wfq".into(), num_cores: 2, seed: 7, mode: LogMode::VirtualTime }
    }

    fn write(events: &[RecordEvent]) -> Vec<u8> {
        let mut w = LogWriter::new(Vec::new(), &header()).unwrap();
        for e in events {
            w.write_event(e).unwrap();
        }
        w.finish(0, events.len() as u64).unwrap()
    }

    fn ev(seq: u64, worker: u32, kind: EventKind, lock: u32) -> RecordEvent {
        RecordEvent { seq, worker, kind, lock, payload: Vec::new() }
    }

    #[test]
    fn empty_log_loads_empty() {
        let log = parse_log(&write(&[])).unwrap();
        assert_eq!(log.header, header());
        assert!(log.events.is_empty());
        assert!(log.lock_orders.is_empty());
    }

    #[test]
    fn acquisition_lists_follow_log_order() {
        let events = [
            ev(0, u32::MAX, EventKind::LockCreate, 0),
            ev(1, 0, EventKind::LockAcquire, 0),
            ev(2, 0, EventKind::LockRelease, 0),
            ev(3, 1, EventKind::LockAcquire, 0),
            ev(4, 1, EventKind::LockRelease, 0),
            ev(5, 0, EventKind::LockAcquire, 0),
            ev(6, 0, EventKind::LockRelease, 0),
        ];
        let log = parse_log(&write(&events)).unwrap();
        assert_eq!(log.lock_orders[&0], vec![0, 1, 0]);
        assert_eq!(log.locks_created, 1);
    }

    #[test]
    fn truncated_final_record_reports_its_offset() {
        let events = [ev(0, 0, EventKind::Call, 0), ev(1, 0, EventKind::Response, 0)];
        let bytes = write(&events);
        // Header is 14 + 4 + 3 + 4 + 8 + 1 bytes; each record 4 + 17.
        let header_end = 14 + 4 + 3 + 4 + 8 + 1;
        let second = header_end + 21;
        let cut = &bytes[..second + 10];
        match parse_log(cut) {
            Err(LogError::CorruptLog { offset, .. }) => assert_eq!(offset, second),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_footer_is_corrupt() {
        let bytes = write(&[ev(0, 0, EventKind::Call, 0)]);
        let footer_len = 4 + 17 + 16;
        assert!(matches!(
            parse_log(&bytes[..bytes.len() - footer_len]),
            Err(LogError::CorruptLog { .. })
        ));
    }

    #[test]
    fn bad_magic_is_corrupt_at_zero() {
        let mut bytes = write(&[]);
        bytes[0] = b'X';
        assert!(matches!(parse_log(&bytes), Err(LogError::CorruptLog { offset: 0, .. })));
    }
}
