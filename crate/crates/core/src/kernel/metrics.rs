//! Run results.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::api::{CoreId, MessageKind, TaskId};
use crate::hints::{HintRecord, QueueId};
use crate::registry::UpgradeReport;

/// Why a task was waiting before a run began.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum WaitCause {
    Spawn,
    Wake,
    /// Put back on a run-queue while still runnable.
    Requeue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LatencySample {
    pub task: TaskId,
    pub label: u32,
    pub cause: WaitCause,
    /// Time from the request (spawn, wake, requeue) to running.
    pub ns: u64,
    /// When the request was made.
    pub at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaskReport {
    pub id: TaskId,
    pub label: String,
    pub class: usize,
    pub nice: i8,
    pub group: u32,
    pub spawned_at: u64,
    pub first_run_at: Option<u64>,
    pub completed_at: Option<u64>,
    pub runtime_ns: u64,
    pub runs: u64,
}

impl TaskReport {
    pub fn response_ns(&self) -> Option<u64> {
        self.completed_at.map(|c| c - self.spawned_at)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub decisions: u64,
    pub rejections: u64,
    /// `pnt_err` calls made for rejected tokens.
    pub pnt_err_rejections: u64,
    /// `pnt_err` calls returning a lower class's pick after preemption.
    pub pnt_err_preempt: u64,
    pub livelock_guards: u64,
    pub balance_err: u64,
    pub migrations: u64,
    /// Migrations where the policy kept the superseded token.
    pub withheld: u64,
    pub hints: u64,
    pub hints_full: u64,
    pub outbound_full: u64,
    pub bad_select: u64,
    pub runaway: u64,
    pub upgrade_failures: u64,
}

/// One observable scheduling event, in the order the simulator produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TraceEntry {
    Issue { at: u64, task: TaskId, core: CoreId, serial: u64 },
    Revoke { at: u64, task: TaskId, serial: u64 },
    Dispatch { at: u64, core: CoreId, task: TaskId, serial: u64 },
    Reject { at: u64, core: CoreId, task: TaskId, serial: u64 },
    PntErr { at: u64, core: CoreId, task: TaskId, serial: u64 },
    Preempt { at: u64, core: CoreId, task: TaskId },
    Block { at: u64, core: CoreId, task: TaskId },
    Exit { at: u64, core: CoreId, task: TaskId },
    Idle { at: u64, core: CoreId },
}

impl TraceEntry {
    pub(crate) fn bytes(&self) -> [u8; 33] {
        let (tag, at, a, b, c) = match *self {
            TraceEntry::Issue { at, task, core, serial } => (0, at, task.0, core.0 as u64, serial),
            TraceEntry::Revoke { at, task, serial } => (1, at, task.0, 0, serial),
            TraceEntry::Dispatch { at, core, task, serial } => (2, at, task.0, core.0 as u64, serial),
            TraceEntry::Reject { at, core, task, serial } => (3, at, task.0, core.0 as u64, serial),
            TraceEntry::PntErr { at, core, task, serial } => (4, at, task.0, core.0 as u64, serial),
            TraceEntry::Preempt { at, core, task } => (5, at, task.0, core.0 as u64, 0),
            TraceEntry::Block { at, core, task } => (6, at, task.0, core.0 as u64, 0),
            TraceEntry::Exit { at, core, task } => (7, at, task.0, core.0 as u64, 0),
            TraceEntry::Idle { at, core } => (8, at, 0, core.0 as u64, 0),
        };
        let mut out = [0u8; 33];
        out[0] = tag;
        out[1..9].copy_from_slice(&at.to_le_bytes());
        out[9..17].copy_from_slice(&a.to_le_bytes());
        out[17..25].copy_from_slice(&b.to_le_bytes());
        out[25..33].copy_from_slice(&c.to_le_bytes());
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct InvariantReport {
    /// Dispatches of a task that was not runnable on that core.
    pub invalid_dispatches: u64,
    pub task_runtime_ns: u64,
    pub core_busy_ns: u64,
    pub run_transitions: u64,
    pub latency_samples: u64,
}

impl InvariantReport {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.invalid_dispatches > 0 {
            v.push(format!("{} invalid dispatches", self.invalid_dispatches));
        }
        if self.task_runtime_ns != self.core_busy_ns {
            v.push(format!("task runtime {} != core busy time {}", self.task_runtime_ns, self.core_busy_ns));
        }
        if self.run_transitions != self.latency_samples {
            v.push(format!("{} runs but {} latency samples", self.run_transitions, self.latency_samples));
        }
        v
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Metrics {
    pub end_ns: u64,
    pub num_cores: u32,
    pub tasks: Vec<TaskReport>,
    pub labels: Vec<String>,
    pub latencies: Vec<LatencySample>,
    pub messages: BTreeMap<MessageKind, u64>,
    pub counters: Counters,
    pub core_busy_ns: Vec<u64>,
    #[serde(skip)]
    pub downstream: Vec<(u64, QueueId, HintRecord)>,
    pub upgrades: Vec<UpgradeReport>,
    pub upgrade_errors: Vec<String>,
    #[serde(skip)]
    pub trace: Vec<TraceEntry>,
    /// SHA-256 over every trace entry, kept whether or not the trace is.
    pub trace_digest: String,
    pub invariants: InvariantReport,
}

/// Nearest-rank percentile; 0 for an empty set.
pub fn percentile(samples: &[u64], p: f64) -> u64 {
    if samples.is_empty() {
        return 0;
    }
    let mut v = samples.to_vec();
    v.sort_unstable();
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

impl Metrics {
    pub fn label_id(&self, label: &str) -> Option<u32> {
        self.labels.iter().position(|l| l == label).map(|i| i as u32)
    }

    /// Latency samples for runs that followed a spawn or wake requested at
    /// or after `from_ns`. `label` of `None` takes every task.
    pub fn wake_latencies(&self, label: Option<&str>, from_ns: u64) -> Vec<u64> {
        let id = label.map(|l| self.label_id(l));
        self.latencies
            .iter()
            .filter(|s| s.cause != WaitCause::Requeue && s.at >= from_ns)
            .filter(|s| match id {
                None => true,
                Some(id) => Some(s.label) == id,
            })
            .map(|s| s.ns)
            .collect()
    }

    /// Spawn-to-exit times of completed tasks spawned at or after `from_ns`.
    pub fn response_times(&self, label: Option<&str>, from_ns: u64) -> Vec<u64> {
        self.tasks
            .iter()
            .filter(|t| label.is_none_or(|l| t.label == l) && t.spawned_at >= from_ns)
            .filter_map(|t| t.response_ns())
            .collect()
    }

    pub fn task(&self, id: TaskId) -> Option<&TaskReport> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn runtime_of(&self, label: &str) -> u64 {
        self.tasks.iter().filter(|t| t.label == label).map(|t| t.runtime_ns).sum()
    }

    /// Fraction of all core time over the run spent on tasks with `label`.
    pub fn cpu_share(&self, label: &str) -> f64 {
        let capacity = self.end_ns as f64 * self.num_cores as f64;
        if capacity == 0.0 {
            return 0.0;
        }
        self.runtime_of(label) as f64 / capacity
    }

    pub fn message_count(&self, kind: MessageKind) -> u64 {
        self.messages.get(&kind).copied().unwrap_or(0)
    }

    pub fn violations(&self) -> Vec<String> {
        self.invariants.violations()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 50.0), 50);
        assert_eq!(percentile(&v, 99.0), 99);
        assert_eq!(percentile(&v, 100.0), 100);
        assert_eq!(percentile(&[7], 99.0), 7);
        assert_eq!(percentile(&[], 50.0), 0);
        assert_eq!(percentile(&[3, 1, 2], 50.0), 2);
    }
}
