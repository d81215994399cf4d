//! Little-endian binary encoding of messages and responses for the log.

use thiserror::Error;

use crate::api::{
    BalanceMove, CoreId, FormatTag, MessageKind, Pick, Schedulable, SchedMessage, SchedResponse, SelectRq,
    TaskAttrs, TaskId, TickDecision, UpgradeCapsule,
};
use crate::hints::{HintDirection, HintRecord, QueueId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("payload ends early at byte {0}")]
    Truncated(usize),
    #[error("bad tag {tag} at byte {at}")]
    BadTag { tag: u8, at: usize },
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("invalid utf-8 in string")]
    Utf8,
}

#[derive(Default)]
pub(crate) struct Enc(pub Vec<u8>);

impl Enc {
    pub fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn bool(&mut self, v: bool) {
        self.u8(v as u8);
    }
    pub fn bytes(&mut self, v: &[u8]) {
        self.u32(v.len() as u32);
        self.0.extend_from_slice(v);
    }
    pub fn str(&mut self, v: &str) {
        self.bytes(v.as_bytes());
    }
    fn opt<T>(&mut self, v: Option<T>, f: impl FnOnce(&mut Self, T)) {
        match v {
            None => self.u8(0),
            Some(x) => {
                self.u8(1);
                f(self, x);
            }
        }
    }
    fn core(&mut self, c: CoreId) {
        self.u32(c.0);
    }
    fn token(&mut self, t: &Schedulable) {
        self.u64(t.task().0);
        self.u32(t.core().0);
        self.u64(t.serial());
    }
    fn hint(&mut self, h: &HintRecord) {
        self.bytes(h.as_bytes());
    }
    fn capsule(&mut self, c: &UpgradeCapsule) {
        self.u64(c.tag.0);
        self.bytes(&c.bytes);
        self.u32(c.tokens.len() as u32);
        for t in &c.tokens {
            self.token(t);
        }
    }
}

pub(crate) struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Dec { buf, pos: 0 }
    }
    pub fn pos(&self) -> usize {
        self.pos
    }
    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.remaining() < n {
            return Err(CodecError::Truncated(self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn bool(&mut self) -> Result<bool, CodecError> {
        let at = self.pos;
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            tag => Err(CodecError::BadTag { tag, at }),
        }
    }
    pub fn bytes(&mut self) -> Result<Vec<u8>, CodecError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }
    pub fn str(&mut self) -> Result<String, CodecError> {
        String::from_utf8(self.bytes()?).map_err(|_| CodecError::Utf8)
    }
    fn opt<T>(&mut self, f: impl FnOnce(&mut Self) -> Result<T, CodecError>) -> Result<Option<T>, CodecError> {
        Ok(if self.bool()? { Some(f(self)?) } else { None })
    }
    fn core(&mut self) -> Result<CoreId, CodecError> {
        Ok(CoreId(self.u32()?))
    }
    fn task(&mut self) -> Result<TaskId, CodecError> {
        Ok(TaskId(self.u64()?))
    }
    fn token(&mut self) -> Result<Schedulable, CodecError> {
        let task = self.task()?;
        let core = self.core()?;
        Ok(Schedulable::forge(task, core, self.u64()?))
    }
    fn hint(&mut self) -> Result<HintRecord, CodecError> {
        Ok(HintRecord::from_bytes(self.bytes()?))
    }
    fn capsule(&mut self) -> Result<UpgradeCapsule, CodecError> {
        let tag = FormatTag(self.u64()?);
        let bytes = self.bytes()?;
        let n = self.u32()?;
        let tokens = (0..n).map(|_| self.token()).collect::<Result<_, _>>()?;
        Ok(UpgradeCapsule { tag, bytes, tokens })
    }
    pub fn end(&self) -> Result<(), CodecError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(CodecError::Trailing(n)),
        }
    }
}

fn kind_index(kind: MessageKind) -> u8 {
    MessageKind::ALL.iter().position(|&k| k == kind).unwrap() as u8
}

pub fn encode_message(msg: &SchedMessage) -> Vec<u8> {
    let mut e = Enc::default();
    e.u8(kind_index(msg.kind()));
    match msg {
        SchedMessage::PickNextTask { core, current, runtime_delta_ns } => {
            e.core(*core);
            e.opt(current.as_ref(), |e, t| e.token(t));
            e.u64(*runtime_delta_ns);
        }
        SchedMessage::PntErr { core, token } => {
            e.core(*core);
            e.token(token);
        }
        SchedMessage::TaskNew { task, attrs, token } => {
            e.u64(task.0);
            e.u8(attrs.nice as u8);
            e.u32(attrs.group);
            e.opt(attrs.pinned, |e, c| e.core(c));
            e.token(token);
        }
        SchedMessage::TaskWakeup { task, token } => {
            e.u64(task.0);
            e.token(token);
        }
        SchedMessage::TaskBlocked { task, core, runtime_delta_ns }
        | SchedMessage::TaskDead { task, core, runtime_delta_ns } => {
            e.u64(task.0);
            e.core(*core);
            e.u64(*runtime_delta_ns);
        }
        SchedMessage::TaskTick { core, task, runtime_delta_ns } => {
            e.core(*core);
            e.u64(task.0);
            e.u64(*runtime_delta_ns);
        }
        SchedMessage::SelectTaskRq(req) => {
            e.u64(req.task.0);
            e.u32(req.group);
            e.opt(req.prev_core, |e, c| e.core(c));
            e.opt(req.waker_core, |e, c| e.core(c));
            e.opt(req.pinned, |e, c| e.core(c));
        }
        SchedMessage::MigrateTaskRq { task, from, token } => {
            e.u64(task.0);
            e.core(*from);
            e.token(token);
        }
        SchedMessage::Balance { core, busy } => {
            e.core(*core);
            e.bool(*busy);
        }
        SchedMessage::BalanceErr { core, task, token } => {
            e.core(*core);
            e.u64(task.0);
            e.opt(token.as_ref(), |e, t| e.token(t));
        }
        SchedMessage::RegisterQueue { queue, direction, capacity } => {
            e.u32(queue.0);
            e.u8(match direction {
                HintDirection::UserToSched => 0,
                HintDirection::SchedToUser => 1,
            });
            e.u32(*capacity);
        }
        SchedMessage::EnterQueue { queue, pending } => {
            e.u32(queue.0);
            e.u32(*pending);
        }
        SchedMessage::UnregisterQueue { queue } => e.u32(queue.0),
        SchedMessage::ParseHint { queue, hint } => {
            e.u32(queue.0);
            e.hint(hint);
        }
        SchedMessage::ReregisterPrep => {}
        SchedMessage::ReregisterInit { capsule } => e.capsule(capsule),
    }
    e.0
}

pub fn decode_message(buf: &[u8]) -> Result<SchedMessage, CodecError> {
    let mut d = Dec::new(buf);
    let tag = d.u8()?;
    let kind = *MessageKind::ALL.get(tag as usize).ok_or(CodecError::BadTag { tag, at: 0 })?;
    let msg = match kind {
        MessageKind::PickNextTask => SchedMessage::PickNextTask {
            core: d.core()?,
            current: d.opt(|d| d.token())?,
            runtime_delta_ns: d.u64()?,
        },
        MessageKind::PntErr => SchedMessage::PntErr { core: d.core()?, token: d.token()? },
        MessageKind::TaskNew => {
            let task = d.task()?;
            let nice = d.u8()? as i8;
            let group = d.u32()?;
            let pinned = d.opt(|d| d.core())?;
            SchedMessage::TaskNew { task, attrs: TaskAttrs { nice, group, pinned }, token: d.token()? }
        }
        MessageKind::TaskWakeup => SchedMessage::TaskWakeup { task: d.task()?, token: d.token()? },
        MessageKind::TaskBlocked => {
            SchedMessage::TaskBlocked { task: d.task()?, core: d.core()?, runtime_delta_ns: d.u64()? }
        }
        MessageKind::TaskDead => SchedMessage::TaskDead { task: d.task()?, core: d.core()?, runtime_delta_ns: d.u64()? },
        MessageKind::TaskTick => SchedMessage::TaskTick { core: d.core()?, task: d.task()?, runtime_delta_ns: d.u64()? },
        MessageKind::SelectTaskRq => SchedMessage::SelectTaskRq(SelectRq {
            task: d.task()?,
            group: d.u32()?,
            prev_core: d.opt(|d| d.core())?,
            waker_core: d.opt(|d| d.core())?,
            pinned: d.opt(|d| d.core())?,
        }),
        MessageKind::MigrateTaskRq => SchedMessage::MigrateTaskRq { task: d.task()?, from: d.core()?, token: d.token()? },
        MessageKind::Balance => SchedMessage::Balance { core: d.core()?, busy: d.bool()? },
        MessageKind::BalanceErr => {
            SchedMessage::BalanceErr { core: d.core()?, task: d.task()?, token: d.opt(|d| d.token())? }
        }
        MessageKind::RegisterQueue => {
            let queue = QueueId(d.u32()?);
            let at = d.pos();
            let direction = match d.u8()? {
                0 => HintDirection::UserToSched,
                1 => HintDirection::SchedToUser,
                tag => return Err(CodecError::BadTag { tag, at }),
            };
            SchedMessage::RegisterQueue { queue, direction, capacity: d.u32()? }
        }
        MessageKind::EnterQueue => SchedMessage::EnterQueue { queue: QueueId(d.u32()?), pending: d.u32()? },
        MessageKind::UnregisterQueue => SchedMessage::UnregisterQueue { queue: QueueId(d.u32()?) },
        MessageKind::ParseHint => SchedMessage::ParseHint { queue: QueueId(d.u32()?), hint: d.hint()? },
        MessageKind::ReregisterPrep => SchedMessage::ReregisterPrep,
        MessageKind::ReregisterInit => SchedMessage::ReregisterInit { capsule: d.capsule()? },
    };
    d.end()?;
    Ok(msg)
}

pub fn encode_response(resp: &SchedResponse) -> Vec<u8> {
    let mut e = Enc::default();
    match resp {
        SchedResponse::Ack => e.u8(0),
        SchedResponse::Pick(p) => {
            e.u8(1);
            e.opt(p.token.as_ref(), |e, t| e.token(t));
            e.opt(p.timer_ns, |e, v| e.u64(v));
        }
        SchedResponse::Core(c) => {
            e.u8(2);
            e.core(*c);
        }
        SchedResponse::Tick(t) => {
            e.u8(3);
            e.bool(t.preempt);
            e.opt(t.timer_ns, |e, v| e.u64(v));
        }
        SchedResponse::Balance(m) => {
            e.u8(4);
            e.opt(m.as_ref(), |e, m| {
                e.u64(m.task.0);
                e.core(m.from);
            });
        }
        SchedResponse::Migrated(t) => {
            e.u8(5);
            e.opt(t.as_ref(), |e, t| e.token(t));
        }
        SchedResponse::Queue { accepted } => {
            e.u8(6);
            e.bool(*accepted);
        }
        SchedResponse::Outbound(out) => {
            e.u8(7);
            e.u32(out.len() as u32);
            for (q, h) in out {
                e.u32(q.0);
                e.hint(h);
            }
        }
        SchedResponse::Capsule(r) => {
            e.u8(8);
            match r {
                Ok(c) => {
                    e.u8(1);
                    e.capsule(c);
                }
                Err(msg) => {
                    e.u8(0);
                    e.str(msg);
                }
            }
        }
        SchedResponse::Init(r) => {
            e.u8(9);
            match r {
                Ok(()) => e.u8(1),
                Err((msg, c)) => {
                    e.u8(0);
                    e.str(msg);
                    e.capsule(c);
                }
            }
        }
    }
    e.0
}

pub fn decode_response(buf: &[u8]) -> Result<SchedResponse, CodecError> {
    let mut d = Dec::new(buf);
    let resp = match d.u8()? {
        0 => SchedResponse::Ack,
        1 => SchedResponse::Pick(Pick { token: d.opt(|d| d.token())?, timer_ns: d.opt(|d| d.u64())? }),
        2 => SchedResponse::Core(d.core()?),
        3 => SchedResponse::Tick(TickDecision { preempt: d.bool()?, timer_ns: d.opt(|d| d.u64())? }),
        4 => SchedResponse::Balance(d.opt(|d| Ok(BalanceMove { task: d.task()?, from: d.core()? }))?),
        5 => SchedResponse::Migrated(d.opt(|d| d.token())?),
        6 => SchedResponse::Queue { accepted: d.bool()? },
        7 => {
            let n = d.u32()?;
            let out = (0..n)
                .map(|_| Ok((QueueId(d.u32()?), d.hint()?)))
                .collect::<Result<_, CodecError>>()?;
            SchedResponse::Outbound(out)
        }
        8 => SchedResponse::Capsule(if d.bool()? { Ok(d.capsule()?) } else { Err(d.str()?) }),
        9 => SchedResponse::Init(if d.bool()? {
            Ok(())
        } else {
            let msg = d.str()?;
            Err((msg, d.capsule()?))
        }),
        tag => return Err(CodecError::BadTag { tag, at: 0 }),
    };
    d.end()?;
    Ok(resp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(task: u64, core: u32, serial: u64) -> Schedulable {
        Schedulable::forge(TaskId(task), CoreId(core), serial)
    }

    fn round_trip(msg: SchedMessage) {
        let bytes = encode_message(&msg);
        let back = decode_message(&bytes).unwrap();
        assert_eq!(format!("{msg:?}"), format!("{back:?}"));
        assert_eq!(encode_message(&back), bytes);
    }

    #[test]
    fn every_message_kind_round_trips() {
        let msgs = vec![
            SchedMessage::PickNextTask { core: CoreId(1), current: Some(tok(3, 1, 9)), runtime_delta_ns: 77 },
            SchedMessage::PntErr { core: CoreId(0), token: tok(1, 2, 3) },
            SchedMessage::TaskNew {
                task: TaskId(4),
                attrs: TaskAttrs { nice: -20, group: 2, pinned: Some(CoreId(3)) },
                token: tok(4, 3, 1),
            },
            SchedMessage::TaskWakeup { task: TaskId(4), token: tok(4, 0, 11) },
            SchedMessage::TaskBlocked { task: TaskId(4), core: CoreId(0), runtime_delta_ns: 5 },
            SchedMessage::TaskDead { task: TaskId(4), core: CoreId(0), runtime_delta_ns: 0 },
            SchedMessage::TaskTick { core: CoreId(2), task: TaskId(8), runtime_delta_ns: 1_000_000 },
            SchedMessage::SelectTaskRq(SelectRq {
                task: TaskId(1),
                group: 0,
                prev_core: Some(CoreId(1)),
                waker_core: None,
                pinned: None,
            }),
            SchedMessage::MigrateTaskRq { task: TaskId(1), from: CoreId(2), token: tok(1, 0, 4) },
            SchedMessage::Balance { core: CoreId(0), busy: true },
            SchedMessage::BalanceErr { core: CoreId(0), task: TaskId(2), token: None },
            SchedMessage::RegisterQueue { queue: QueueId(1), direction: HintDirection::SchedToUser, capacity: 64 },
            SchedMessage::EnterQueue { queue: QueueId(1), pending: 3 },
            SchedMessage::UnregisterQueue { queue: QueueId(1) },
            SchedMessage::ParseHint { queue: QueueId(0), hint: HintRecord::from_words(&[9, 2]) },
            SchedMessage::ReregisterPrep,
            SchedMessage::ReregisterInit {
                capsule: UpgradeCapsule { tag: FormatTag(5), bytes: vec![1, 2], tokens: vec![tok(1, 1, 1)] },
            },
        ];
        assert_eq!(msgs.len(), MessageKind::ALL.len());
        for m in msgs {
            round_trip(m);
        }
    }

    #[test]
    fn responses_round_trip() {
        let resps = vec![
            SchedResponse::Ack,
            SchedResponse::Pick(Pick::run(tok(1, 0, 2)).with_timer(10_000)),
            SchedResponse::Pick(Pick::idle()),
            SchedResponse::Core(CoreId(3)),
            SchedResponse::Tick(TickDecision { preempt: true, timer_ns: None }),
            SchedResponse::Balance(Some(BalanceMove { task: TaskId(3), from: CoreId(1) })),
            SchedResponse::Migrated(None),
            SchedResponse::Queue { accepted: false },
            SchedResponse::Outbound(vec![(QueueId(2), HintRecord::from_words(&[1, 5]))]),
            SchedResponse::Capsule(Err("nope".into())),
            SchedResponse::Init(Ok(())),
        ];
        for r in resps {
            let bytes = encode_response(&r);
            assert_eq!(encode_response(&decode_response(&bytes).unwrap()), bytes);
        }
    }

    #[test]
    fn truncated_payload_is_reported() {
        let bytes = encode_message(&SchedMessage::Balance { core: CoreId(0), busy: false });
        assert!(matches!(decode_message(&bytes[..3]), Err(CodecError::Truncated(_))));
    }
}
