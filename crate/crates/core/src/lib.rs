//! A userspace framework for writing CPU scheduling policies, with a
//! discrete-event simulator standing in for the kernel.
//!
//! Policies implement [`api::SchedulerPolicy`] and are driven purely through
//! messages. The simulator in [`kernel`] owns cores, tasks and time, hands
//! policies [`api::Schedulable`] tokens and refuses to dispatch anything it
//! cannot validate. [`registry`] swaps policy instances at runtime,
//! [`hints`] carries policy-defined records between workloads and policies,
//! and [`record`] logs every call so a policy can be replayed
//! deterministically outside the simulator.

pub mod api;
pub mod bench;
pub mod hints;
pub mod kernel;
pub mod policies;
pub mod record;
pub mod registry;

pub use api::{CoreId, Schedulable, SchedulerPolicy, TaskId};
