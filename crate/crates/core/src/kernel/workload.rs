//! Workload descriptions and their TOML form.
//!
//! ```toml
//! name = "two-spinners"
//! cores = 2
//! duration_ns = 50_000_000
//!
//! [[task]]
//! label = "spin"
//! count = 2
//! nice = 0
//! body = [{ compute = 1_000_000 }, "yield"]
//! repeat = 20
//! ```
//!
//! `prologue`, `body` and `repeat` form the task's [`Program`]; `class`
//! indexes the workload's `policies` list (class 0 is served first).

use serde::{Deserialize, Serialize};

use super::program::{Program, Step};
use crate::api::CoreId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub label: String,
    pub program: Program,
    pub nice: i8,
    pub class: usize,
    pub group: u32,
    pub pinned: Option<CoreId>,
    pub arrival_ns: u64,
}

impl TaskSpec {
    pub fn new(label: impl Into<String>, program: Program) -> Self {
        TaskSpec { label: label.into(), program, nice: 0, class: 0, group: 0, pinned: None, arrival_ns: 0 }
    }

    pub fn nice(mut self, nice: i8) -> Self {
        self.nice = nice;
        self
    }

    pub fn class(mut self, class: usize) -> Self {
        self.class = class;
        self
    }

    pub fn group(mut self, group: u32) -> Self {
        self.group = group;
        self
    }

    pub fn pinned(mut self, core: u32) -> Self {
        self.pinned = Some(CoreId(core));
        self
    }

    pub fn at(mut self, arrival_ns: u64) -> Self {
        self.arrival_ns = arrival_ns;
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub name: String,
    pub num_cores: u32,
    pub tasks: Vec<TaskSpec>,
    /// Stop here even if tasks remain.
    pub duration_ns: Option<u64>,
    /// Samples requested before this are ignored by reports.
    pub warmup_ns: u64,
    /// Policy per class, by name. Empty means the caller chooses.
    pub policies: Vec<String>,
    /// Capacity of the up-queue opened for class 0, if any.
    pub hint_queue: Option<u32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileTask {
    label: String,
    #[serde(default = "one")]
    count: u32,
    #[serde(default)]
    nice: i8,
    #[serde(default)]
    class: usize,
    #[serde(default)]
    group: u32,
    pinned: Option<u32>,
    #[serde(default)]
    arrival_ns: u64,
    #[serde(default)]
    prologue: Vec<Step>,
    #[serde(default)]
    body: Vec<Step>,
    repeat: Option<u64>,
}

fn one() -> u32 {
    1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileWorkload {
    #[serde(default)]
    name: String,
    cores: u32,
    duration_ns: Option<u64>,
    #[serde(default)]
    warmup_ns: u64,
    #[serde(default)]
    policies: Vec<String>,
    hint_queue: Option<u32>,
    #[serde(default)]
    task: Vec<FileTask>,
}

impl Workload {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let f: FileWorkload = toml::from_str(text).map_err(|e| e.to_string())?;
        if f.cores == 0 {
            return Err("cores must be at least 1".into());
        }
        let mut tasks = Vec::new();
        for t in f.task {
            if t.body.is_empty() && t.repeat.is_some_and(|r| r > 0) {
                return Err(format!("task {:?} repeats an empty body", t.label));
            }
            let program = Program { prologue: t.prologue, body: t.body, repeat: t.repeat };
            for _ in 0..t.count {
                let mut spec = TaskSpec::new(t.label.clone(), program.clone())
                    .nice(t.nice)
                    .class(t.class)
                    .group(t.group)
                    .at(t.arrival_ns);
                spec.pinned = t.pinned.map(CoreId);
                tasks.push(spec);
            }
        }
        Ok(Workload {
            name: f.name,
            num_cores: f.cores,
            tasks,
            duration_ns: f.duration_ns,
            warmup_ns: f.warmup_ns,
            policies: f.policies,
            hint_queue: f.hint_queue,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text)
    }
}
