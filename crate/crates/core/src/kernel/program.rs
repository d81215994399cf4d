//! Task programs.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::api::TaskId;

/// One word of a hint a task sends about itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HintWord {
    Lit(u64),
    SelfTask,
    SelfGroup,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    /// Run on the CPU for this many ns.
    Compute(u64),
    /// Wait for a signal on an event. Signals are counted, so one sent
    /// before the wait is not lost.
    Block(u32),
    Signal(u32),
    Sleep(u64),
    Yield,
    Exit,
    /// Send a record on the task's class up-queue.
    Hint(Vec<HintWord>),
    /// Leave the CPU and come back pinned to a core.
    Migrate(u32),
}

impl Step {
    /// Steps that complete without giving up the CPU or using it.
    pub fn is_instant(&self) -> bool {
        matches!(self, Step::Signal(_) | Step::Hint(_))
    }
}

/// `prologue` runs once, then `body` runs `repeat` times (forever if `None`).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Program {
    #[serde(default)]
    pub prologue: Vec<Step>,
    #[serde(default)]
    pub body: Vec<Step>,
    #[serde(default)]
    pub repeat: Option<u64>,
}

impl Program {
    pub fn once(steps: Vec<Step>) -> Self {
        Program { prologue: steps, body: Vec::new(), repeat: Some(0) }
    }

    pub fn looping(prologue: Vec<Step>, body: Vec<Step>) -> Self {
        Program { prologue, body, repeat: None }
    }

    pub fn repeated(prologue: Vec<Step>, body: Vec<Step>, times: u64) -> Self {
        Program { prologue, body, repeat: Some(times) }
    }

    /// Total compute if the program never blocks forever. `None` for
    /// unbounded programs.
    pub fn total_compute(&self) -> Option<u64> {
        let sum = |s: &[Step]| s.iter().map(|s| if let Step::Compute(n) = s { *n } else { 0 }).sum::<u64>();
        let body = sum(&self.body);
        match self.repeat {
            Some(k) => Some(sum(&self.prologue) + body * k),
            None if body == 0 && self.body.is_empty() => Some(sum(&self.prologue)),
            None => None,
        }
    }
}

/// Position within a program.
#[derive(Debug, Clone, Default)]
pub(crate) struct Cursor {
    in_body: bool,
    index: usize,
    iteration: u64,
}

impl Cursor {
    pub fn step<'a>(&mut self, p: &'a Program) -> Option<&'a Step> {
        loop {
            if !self.in_body {
                if let Some(s) = p.prologue.get(self.index) {
                    return Some(s);
                }
                self.in_body = true;
                self.index = 0;
            }
            if p.body.is_empty() || p.repeat.is_some_and(|k| self.iteration >= k) {
                return None;
            }
            if let Some(s) = p.body.get(self.index) {
                return Some(s);
            }
            self.index = 0;
            self.iteration += 1;
        }
    }

    pub fn advance(&mut self) {
        self.index += 1;
    }
}

/// Counting events tasks block on and signal.
#[derive(Debug, Default)]
pub(crate) struct EventTable {
    counts: HashMap<u32, u64>,
    waiters: HashMap<u32, VecDeque<TaskId>>,
}

impl EventTable {
    /// Takes a pending signal if there is one.
    pub fn try_take(&mut self, ev: u32) -> bool {
        match self.counts.get_mut(&ev) {
            Some(n) if *n > 0 => {
                *n -= 1;
                true
            }
            _ => false,
        }
    }

    pub fn wait(&mut self, ev: u32, task: TaskId) {
        self.waiters.entry(ev).or_default().push_back(task);
    }

    /// Returns the waiter to wake, or banks the signal.
    pub fn signal(&mut self, ev: u32) -> Option<TaskId> {
        if let Some(t) = self.waiters.get_mut(&ev).and_then(|q| q.pop_front()) {
            return Some(t);
        }
        *self.counts.entry(ev).or_default() += 1;
        None
    }
}

pub(crate) fn hint_words(words: &[HintWord], task: TaskId, group: u32) -> Vec<u64> {
    words
        .iter()
        .map(|w| match *w {
            HintWord::Lit(v) => v,
            HintWord::SelfTask => task.0,
            HintWord::SelfGroup => group as u64,
        })
        .collect()
}
