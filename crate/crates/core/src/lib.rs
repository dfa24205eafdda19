//! Erasure orchestration core: registry, retention policy, request workflow,
//! deletion job management, audit store and the execution engine.

pub mod error;
pub mod events;
pub mod executor;
pub mod ids;
pub mod management;
pub mod notify;
pub mod plugins;
pub mod policy;
pub mod registry;
pub mod report;
pub mod service;
pub mod sim;
pub mod store;
pub mod targets;
pub mod time;
pub mod workflow;

pub use error::{Error, Result};
