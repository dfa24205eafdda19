//! Simulated target systems and the plugin runner that deletes from them.

pub mod fleet;
pub mod runner;

pub use fleet::{
    ActionEntry, ActionKind, FailPattern, FaultMode, Fleet, FleetSpec, Record, SimulatedSystem, SubjectIdentity,
    SubjectSpec, SystemSpec,
};
pub use runner::{runner_tick, DeferReason, RunnerAction, RunnerState};
