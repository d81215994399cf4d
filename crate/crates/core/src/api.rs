//! The policy-facing contract.
//!
//! A policy only ever sees the framework through [`SchedMessage`]s and
//! answers with [`SchedResponse`]s. Tasks are handed to a policy as
//! [`Schedulable`] tokens: a token names one task and the one core whose
//! run-queue it currently sits on, and returning it from
//! [`SchedulerPolicy::pick_next_task`] is the only way to get that task
//! dispatched. Tokens cannot be cloned; the framework additionally tracks a
//! serial for every live token so that a policy holding on to a superseded
//! token is caught at dispatch time rather than trusted.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::hints::{HintDirection, HintRecord, QueueId};

/// Identity of a simulated task. Never reused within one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskId(pub u64);

/// Index of a simulated core in `[0, num_cores)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CoreId(pub u32);

impl CoreId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "task{}", self.0)
    }
}

impl fmt::Display for CoreId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "core{}", self.0)
    }
}

/// Proof that `task` is queued on `core` and may be dispatched there.
///
/// Deliberately neither `Clone` nor `Copy`.
#[derive(Debug, PartialEq, Eq)]
pub struct Schedulable {
    task: TaskId,
    core: CoreId,
    serial: u64,
}

impl Schedulable {
    pub fn task(&self) -> TaskId {
        self.task
    }

    pub fn core(&self) -> CoreId {
        self.core
    }

    pub fn serial(&self) -> u64 {
        self.serial
    }

    /// Rebuilds a token from its recorded parts. Only the replay engine does
    /// this: it stands in for the framework that originally issued it.
    pub(crate) fn forge(task: TaskId, core: CoreId, serial: u64) -> Self {
        Schedulable { task, core, serial }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenError {
    #[error("{task} already has a live token (serial {serial})")]
    DuplicateToken { task: TaskId, serial: u64 },
}

/// Outcome of presenting a token for dispatch. Rejected tokens are handed
/// back so they can be returned to the policy through `pnt_err`.
#[derive(Debug, PartialEq, Eq)]
pub enum Verdict {
    Ok,
    WrongCore(Schedulable),
    Stale(Schedulable),
}

impl Verdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, Verdict::Ok)
    }
}

/// Framework-side bookkeeping of live token serials.
#[derive(Debug, Default)]
pub struct TokenRegistry {
    next_serial: u64,
    live: HashMap<TaskId, (CoreId, u64)>,
}

impl TokenRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn issue_token(&mut self, task: TaskId, core: CoreId) -> Result<Schedulable, TokenError> {
        if let Some(&(_, serial)) = self.live.get(&task) {
            return Err(TokenError::DuplicateToken { task, serial });
        }
        self.next_serial += 1;
        let serial = self.next_serial;
        self.live.insert(task, (core, serial));
        Ok(Schedulable { task, core, serial })
    }

    pub fn consume_token(&mut self, token: Schedulable, expected_core: CoreId) -> Verdict {
        match self.live.get(&token.task) {
            Some(&(_, serial)) if serial == token.serial => {
                if token.core != expected_core {
                    Verdict::WrongCore(token)
                } else {
                    self.live.remove(&token.task);
                    Verdict::Ok
                }
            }
            _ => Verdict::Stale(token),
        }
    }

    /// Retires the live serial of `task` without seeing the token, as the
    /// framework does when it moves a queued task to another run-queue.
    pub fn revoke(&mut self, task: TaskId) -> Option<(CoreId, u64)> {
        self.live.remove(&task)
    }

    pub fn live(&self, task: TaskId) -> Option<(CoreId, u64)> {
        self.live.get(&task).copied()
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    pub fn last_serial(&self) -> u64 {
        self.next_serial
    }
}

/// Content hash of a capsule format name. Two policy builds can hand state to
/// each other only if their tags are equal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FormatTag(pub u64);

impl FormatTag {
    pub fn of(format: &str) -> Self {
        let digest = Sha256::digest(format.as_bytes());
        let mut word = [0u8; 8];
        word.copy_from_slice(&digest[..8]);
        FormatTag(u64::from_le_bytes(word))
    }
}

/// State handed from an outgoing policy instance to its replacement.
///
/// The serialized part is opaque to the framework. Tokens travel next to it
/// by value because serializing one would amount to copying it.
#[derive(Debug)]
pub struct UpgradeCapsule {
    pub tag: FormatTag,
    pub bytes: Vec<u8>,
    pub tokens: Vec<Schedulable>,
}

/// What a policy build declares about itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyInfo {
    pub name: String,
    pub version: String,
    /// Name of the upgrade capsule layout; hashed into a [`FormatTag`].
    pub capsule_format: String,
    /// Width in bytes of user-to-scheduler hint records, 0 if unused.
    pub up_hint_width: usize,
    /// Width in bytes of scheduler-to-user hint records, 0 if unused.
    pub down_hint_width: usize,
}

impl PolicyInfo {
    pub fn capsule_tag(&self) -> FormatTag {
        FormatTag::of(&self.capsule_format)
    }
}

/// Static attributes of a task, delivered with `task_new`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskAttrs {
    pub nice: i8,
    /// Thread-group (application) the task belongs to.
    pub group: u32,
    pub pinned: Option<CoreId>,
}

/// Placement request for a new or waking task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectRq {
    pub task: TaskId,
    pub group: u32,
    pub prev_core: Option<CoreId>,
    pub waker_core: Option<CoreId>,
    pub pinned: Option<CoreId>,
}

/// A policy's nomination for moving a waiting task onto the balancing core.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BalanceMove {
    pub task: TaskId,
    pub from: CoreId,
}

/// Answer to `pick_next_task`.
#[derive(Debug, Default)]
pub struct Pick {
    pub token: Option<Schedulable>,
    /// Deliver a `task_tick` after this many ns of running, in addition to
    /// the periodic tick.
    pub timer_ns: Option<u64>,
}

impl Pick {
    pub fn idle() -> Self {
        Pick::default()
    }

    pub fn run(token: Schedulable) -> Self {
        Pick { token: Some(token), timer_ns: None }
    }

    pub fn with_timer(mut self, ns: u64) -> Self {
        self.timer_ns = Some(ns);
        self
    }
}

/// Answer to `task_tick`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TickDecision {
    pub preempt: bool,
    pub timer_ns: Option<u64>,
}

/// Read-only snapshot of a policy's task bookkeeping, used by tests and the
/// upgrade report. Taken outside any message call.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Inspection {
    /// Every task the policy knows about, with its vruntime (0 where the
    /// policy has no such notion).
    pub tasks: BTreeMap<TaskId, u64>,
    /// Number of tokens currently held.
    pub tokens_held: usize,
    /// Core grants per application (core arbiter only).
    pub grants: BTreeMap<u32, Vec<CoreId>>,
    /// Outstanding core requests per application (core arbiter only).
    pub requests: BTreeMap<u32, u32>,
}

impl Inspection {
    pub fn vruntime_sum(&self) -> u128 {
        self.tasks.values().map(|&v| v as u128).sum()
    }
}

/// The operations every scheduling policy implements, one per message kind.
///
/// All entry points take `&self`: calls for different cores may arrive
/// concurrently, so policies keep their state behind locks obtained from the
/// [`LockFactory`](crate::record::LockFactory) they were built with.
pub trait SchedulerPolicy: Send + Sync {
    fn info(&self) -> PolicyInfo;

    fn pick_next_task(&self, core: CoreId, current: Option<Schedulable>, runtime_delta_ns: u64) -> Pick;
    fn pnt_err(&self, core: CoreId, token: Schedulable);
    fn task_new(&self, task: TaskId, attrs: TaskAttrs, token: Schedulable);
    fn task_wakeup(&self, task: TaskId, token: Schedulable);
    fn task_blocked(&self, task: TaskId, core: CoreId, runtime_delta_ns: u64);
    fn task_dead(&self, task: TaskId, core: CoreId, runtime_delta_ns: u64);
    fn task_tick(&self, core: CoreId, task: TaskId, runtime_delta_ns: u64) -> TickDecision;
    fn select_task_rq(&self, req: SelectRq) -> CoreId;
    /// `token` is valid on the new core; the policy must give back the token
    /// it held for the old one.
    fn migrate_task_rq(&self, task: TaskId, from: CoreId, token: Schedulable) -> Option<Schedulable>;
    /// `busy` is true when the balancing core still has a runnable current task.
    fn balance(&self, core: CoreId, busy: bool) -> Option<BalanceMove>;
    fn balance_err(&self, core: CoreId, task: TaskId, token: Option<Schedulable>);
    fn register_queue(&self, queue: QueueId, direction: HintDirection, capacity: u32) -> bool;
    fn enter_queue(&self, queue: QueueId, pending: u32);
    fn unregister_queue(&self, queue: QueueId);
    /// Returns records to push onto scheduler-to-user queues.
    fn parse_hint(&self, queue: QueueId, hint: &HintRecord) -> Vec<(QueueId, HintRecord)>;
    fn reregister_prep(&self) -> Result<UpgradeCapsule, String>;
    /// On failure the capsule is handed back untouched.
    fn reregister_init(&self, capsule: UpgradeCapsule) -> Result<(), (String, UpgradeCapsule)>;

    fn inspect(&self) -> Inspection {
        Inspection::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    PickNextTask,
    PntErr,
    TaskNew,
    TaskWakeup,
    TaskBlocked,
    TaskDead,
    TaskTick,
    SelectTaskRq,
    MigrateTaskRq,
    Balance,
    BalanceErr,
    RegisterQueue,
    EnterQueue,
    UnregisterQueue,
    ParseHint,
    ReregisterPrep,
    ReregisterInit,
}

impl MessageKind {
    pub const ALL: [MessageKind; 17] = [
        MessageKind::PickNextTask,
        MessageKind::PntErr,
        MessageKind::TaskNew,
        MessageKind::TaskWakeup,
        MessageKind::TaskBlocked,
        MessageKind::TaskDead,
        MessageKind::TaskTick,
        MessageKind::SelectTaskRq,
        MessageKind::MigrateTaskRq,
        MessageKind::Balance,
        MessageKind::BalanceErr,
        MessageKind::RegisterQueue,
        MessageKind::EnterQueue,
        MessageKind::UnregisterQueue,
        MessageKind::ParseHint,
        MessageKind::ReregisterPrep,
        MessageKind::ReregisterInit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::PickNextTask => "pick_next_task",
            MessageKind::PntErr => "pnt_err",
            MessageKind::TaskNew => "task_new",
            MessageKind::TaskWakeup => "task_wakeup",
            MessageKind::TaskBlocked => "task_blocked",
            MessageKind::TaskDead => "task_dead",
            MessageKind::TaskTick => "task_tick",
            MessageKind::SelectTaskRq => "select_task_rq",
            MessageKind::MigrateTaskRq => "migrate_task_rq",
            MessageKind::Balance => "balance",
            MessageKind::BalanceErr => "balance_err",
            MessageKind::RegisterQueue => "register_queue",
            MessageKind::EnterQueue => "enter_queue",
            MessageKind::UnregisterQueue => "unregister_queue",
            MessageKind::ParseHint => "parse_hint",
            MessageKind::ReregisterPrep => "reregister_prep",
            MessageKind::ReregisterInit => "reregister_init",
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One framework-to-policy call.
#[derive(Debug)]
pub enum SchedMessage {
    PickNextTask { core: CoreId, current: Option<Schedulable>, runtime_delta_ns: u64 },
    PntErr { core: CoreId, token: Schedulable },
    TaskNew { task: TaskId, attrs: TaskAttrs, token: Schedulable },
    TaskWakeup { task: TaskId, token: Schedulable },
    TaskBlocked { task: TaskId, core: CoreId, runtime_delta_ns: u64 },
    TaskDead { task: TaskId, core: CoreId, runtime_delta_ns: u64 },
    TaskTick { core: CoreId, task: TaskId, runtime_delta_ns: u64 },
    SelectTaskRq(SelectRq),
    MigrateTaskRq { task: TaskId, from: CoreId, token: Schedulable },
    Balance { core: CoreId, busy: bool },
    BalanceErr { core: CoreId, task: TaskId, token: Option<Schedulable> },
    RegisterQueue { queue: QueueId, direction: HintDirection, capacity: u32 },
    EnterQueue { queue: QueueId, pending: u32 },
    UnregisterQueue { queue: QueueId },
    ParseHint { queue: QueueId, hint: HintRecord },
    ReregisterPrep,
    ReregisterInit { capsule: UpgradeCapsule },
}

impl SchedMessage {
    pub fn kind(&self) -> MessageKind {
        match self {
            SchedMessage::PickNextTask { .. } => MessageKind::PickNextTask,
            SchedMessage::PntErr { .. } => MessageKind::PntErr,
            SchedMessage::TaskNew { .. } => MessageKind::TaskNew,
            SchedMessage::TaskWakeup { .. } => MessageKind::TaskWakeup,
            SchedMessage::TaskBlocked { .. } => MessageKind::TaskBlocked,
            SchedMessage::TaskDead { .. } => MessageKind::TaskDead,
            SchedMessage::TaskTick { .. } => MessageKind::TaskTick,
            SchedMessage::SelectTaskRq(_) => MessageKind::SelectTaskRq,
            SchedMessage::MigrateTaskRq { .. } => MessageKind::MigrateTaskRq,
            SchedMessage::Balance { .. } => MessageKind::Balance,
            SchedMessage::BalanceErr { .. } => MessageKind::BalanceErr,
            SchedMessage::RegisterQueue { .. } => MessageKind::RegisterQueue,
            SchedMessage::EnterQueue { .. } => MessageKind::EnterQueue,
            SchedMessage::UnregisterQueue { .. } => MessageKind::UnregisterQueue,
            SchedMessage::ParseHint { .. } => MessageKind::ParseHint,
            SchedMessage::ReregisterPrep => MessageKind::ReregisterPrep,
            SchedMessage::ReregisterInit { .. } => MessageKind::ReregisterInit,
        }
    }
}

/// What a policy handed back for one message.
#[derive(Debug)]
pub enum SchedResponse {
    Ack,
    Pick(Pick),
    Core(CoreId),
    Tick(TickDecision),
    Balance(Option<BalanceMove>),
    Migrated(Option<Schedulable>),
    Queue { accepted: bool },
    Outbound(Vec<(QueueId, HintRecord)>),
    Capsule(Result<UpgradeCapsule, String>),
    Init(Result<(), (String, UpgradeCapsule)>),
}

/// Routes a message to the matching policy entry point.
pub fn policy_call(policy: &dyn SchedulerPolicy, msg: SchedMessage) -> SchedResponse {
    match msg {
        SchedMessage::PickNextTask { core, current, runtime_delta_ns } => {
            SchedResponse::Pick(policy.pick_next_task(core, current, runtime_delta_ns))
        }
        SchedMessage::PntErr { core, token } => {
            policy.pnt_err(core, token);
            SchedResponse::Ack
        }
        SchedMessage::TaskNew { task, attrs, token } => {
            policy.task_new(task, attrs, token);
            SchedResponse::Ack
        }
        SchedMessage::TaskWakeup { task, token } => {
            policy.task_wakeup(task, token);
            SchedResponse::Ack
        }
        SchedMessage::TaskBlocked { task, core, runtime_delta_ns } => {
            policy.task_blocked(task, core, runtime_delta_ns);
            SchedResponse::Ack
        }
        SchedMessage::TaskDead { task, core, runtime_delta_ns } => {
            policy.task_dead(task, core, runtime_delta_ns);
            SchedResponse::Ack
        }
        SchedMessage::TaskTick { core, task, runtime_delta_ns } => {
            SchedResponse::Tick(policy.task_tick(core, task, runtime_delta_ns))
        }
        SchedMessage::SelectTaskRq(req) => SchedResponse::Core(policy.select_task_rq(req)),
        SchedMessage::MigrateTaskRq { task, from, token } => {
            SchedResponse::Migrated(policy.migrate_task_rq(task, from, token))
        }
        SchedMessage::Balance { core, busy } => SchedResponse::Balance(policy.balance(core, busy)),
        SchedMessage::BalanceErr { core, task, token } => {
            policy.balance_err(core, task, token);
            SchedResponse::Ack
        }
        SchedMessage::RegisterQueue { queue, direction, capacity } => SchedResponse::Queue {
            accepted: policy.register_queue(queue, direction, capacity),
        },
        SchedMessage::EnterQueue { queue, pending } => {
            policy.enter_queue(queue, pending);
            SchedResponse::Ack
        }
        SchedMessage::UnregisterQueue { queue } => {
            policy.unregister_queue(queue);
            SchedResponse::Ack
        }
        SchedMessage::ParseHint { queue, hint } => SchedResponse::Outbound(policy.parse_hint(queue, &hint)),
        SchedMessage::ReregisterPrep => SchedResponse::Capsule(policy.reregister_prep()),
        SchedMessage::ReregisterInit { capsule } => SchedResponse::Init(policy.reregister_init(capsule)),
    }
}

/// Weight of a nice level: `1024 * 1.25^(-nice)`.
pub fn nice_weight(nice: i8) -> f64 {
    BASE_WEIGHT * 1.25f64.powi(-(nice as i32))
}

pub const BASE_WEIGHT: f64 = 1024.0;

pub const NICE_MIN: i8 = -20;
pub const NICE_MAX: i8 = 19;
