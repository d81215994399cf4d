//! Simulated kernel side: cores, run-queue membership, virtual time, task
//! lifecycles, and the translation from task events into policy messages.

pub mod concurrent;
pub mod metrics;
pub mod program;
mod sim;
pub mod workload;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::api::{CoreId, MessageKind, TokenError};
use crate::registry::{PolicyPanic, RegistryError};

pub use metrics::{percentile, Counters, LatencySample, Metrics, TaskReport, TraceEntry, WaitCause};
pub use program::{HintWord, Program, Step};
pub use sim::{EventReport, Sim};
pub use workload::{TaskSpec, Workload};

pub const DEFAULT_TICK_NS: u64 = 1_000_000;
pub const DEFAULT_LOCAL_WAKE_NS: u64 = 500;
pub const DEFAULT_REMOTE_WAKE_NS: u64 = 4_000;
/// Rejections tolerated in one dispatch before the core is idled.
pub const MAX_PNT_ERRS: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    VirtualTime,
    Concurrent,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub num_cores: u32,
    pub tick_period_ns: u64,
    pub mode: Mode,
    /// Concurrent mode: virtual ns per wall-clock ns.
    pub time_scale: f64,
    pub seed: u64,
    /// Delay between a wake request and its delivery when waker and wakee
    /// share a core.
    pub wake_cost_local_ns: u64,
    pub wake_cost_remote_ns: u64,
    /// Keep every trace entry in the metrics, not just their digest.
    pub trace: bool,
}

impl SimConfig {
    pub fn new(num_cores: u32) -> Self {
        SimConfig {
            num_cores,
            tick_period_ns: DEFAULT_TICK_NS,
            mode: Mode::VirtualTime,
            time_scale: 1.0,
            seed: 0,
            wake_cost_local_ns: DEFAULT_LOCAL_WAKE_NS,
            wake_cost_remote_ns: DEFAULT_REMOTE_WAKE_NS,
            trace: false,
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn traced(mut self) -> Self {
        self.trace = true;
        self
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    PolicyPanic(#[from] PolicyPanic),
    #[error("token bookkeeping failed: {0}")]
    Token(#[from] TokenError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("{kind} answered for {core}, which does not exist")]
    BadCore { kind: MessageKind, core: CoreId },
    #[error("bad configuration: {0}")]
    Config(String),
}
