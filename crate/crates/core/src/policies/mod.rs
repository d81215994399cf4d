//! Reference policies.

pub mod arbiter;
pub mod locality;
pub mod shinjuku;
pub mod wfq;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::api::SchedulerPolicy;
use crate::record::LockFactory;

pub use arbiter::Arbiter;
pub use locality::Locality;
pub use shinjuku::Shinjuku;
pub use wfq::{TieBreak, Wfq, WfqConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    Wfq,
    /// WFQ breaking placement ties toward the highest core.
    WfqHighTie,
    Shinjuku,
    Locality,
    Arbiter,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] =
        [PolicyKind::Wfq, PolicyKind::WfqHighTie, PolicyKind::Shinjuku, PolicyKind::Locality, PolicyKind::Arbiter];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Wfq => "wfq",
            PolicyKind::WfqHighTie => "wfq-high-tie",
            PolicyKind::Shinjuku => "shinjuku",
            PolicyKind::Locality => "locality",
            PolicyKind::Arbiter => "arbiter",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown policy {s:?}, expected one of wfq, wfq-high-tie, shinjuku, locality, arbiter"))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PolicyParams {
    pub num_cores: u32,
    pub seed: u64,
    pub reserved_cores: u32,
    pub overload_threshold: usize,
}

impl PolicyParams {
    pub fn new(num_cores: u32, seed: u64) -> Self {
        PolicyParams { num_cores, seed, reserved_cores: 1, overload_threshold: locality::DEFAULT_OVERLOAD }
    }
}

pub fn build(kind: PolicyKind, params: PolicyParams, locks: &LockFactory) -> Arc<dyn SchedulerPolicy> {
    let n = params.num_cores;
    match kind {
        PolicyKind::Wfq => Arc::new(Wfq::new(WfqConfig::new(n), locks)),
        PolicyKind::WfqHighTie => {
            Arc::new(Wfq::new(WfqConfig { tie_break: TieBreak::Highest, ..WfqConfig::new(n) }, locks))
        }
        PolicyKind::Shinjuku => Arc::new(Shinjuku::new(n, locks)),
        PolicyKind::Locality => Arc::new(Locality::with_overload(n, params.seed, params.overload_threshold, locks)),
        PolicyKind::Arbiter => Arc::new(Arbiter::new(n, params.reserved_cores, locks)),
    }
}
