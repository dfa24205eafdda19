//! Service configuration, loaded from TOML.

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use erasure_core::executor::ExecutorConfig;
use erasure_core::ids::SystemId;
use erasure_core::notify::Subscription;
use erasure_core::service::Settings;
use erasure_core::time::{ClockMode, Timestamp};
use serde::{Deserialize, Serialize};

use crate::auth::{Principal, Role};

pub const ENV_DATA_DIR: &str = "ERASURE_DATA_DIR";
pub const ENV_LISTEN: &str = "ERASURE_LISTEN";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("ConfigInvalid: {path}: {message}")]
    Invalid { path: String, message: String },
    #[error("cannot read config {path}: {message}")]
    Read { path: String, message: String },
}

impl ConfigError {
    fn invalid(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Invalid { path: path.into(), message: message.into() }
    }

    /// Dotted path of the offending field, if any.
    pub fn path(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { path, .. } => Some(path),
            ConfigError::Read { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleName {
    Operator,
    Reviewer,
    Auditor,
    Runner,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrincipalConfig {
    pub identity: String,
    pub token: String,
    pub role: RoleName,
    /// Required for, and only allowed on, runner principals.
    #[serde(default)]
    pub system_id: Option<SystemId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClockConfig {
    pub mode: ClockMode,
    /// Starting instant of the virtual clock, in Unix seconds.
    pub start: i64,
}

impl Default for ClockConfig {
    fn default() -> Self {
        ClockConfig { mode: ClockMode::RealTime, start: 1_700_000_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen_address: String,
    pub data_dir: PathBuf,
    pub fsync: bool,
    /// Write a state snapshot every this many log entries; 0 disables.
    pub snapshot_every: u64,
    pub clock: ClockConfig,
    pub workflow: Settings,
    pub executor: ExecutorConfig,
    pub principals: Vec<PrincipalConfig>,
    /// Delivered to the `file` channel, `notifications.jsonl` in the data dir.
    pub subscriptions: Vec<Subscription>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            listen_address: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("data"),
            fsync: true,
            snapshot_every: 1000,
            clock: ClockConfig::default(),
            workflow: Settings::default(),
            executor: ExecutorConfig::default(),
            principals: Vec::new(),
            subscriptions: Vec::new(),
        }
    }
}

impl ServiceConfig {
    /// Parses and validates. Errors carry the dotted path of the bad field.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::new(text);
        let cfg: ServiceConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::invalid(if path == "." { String::new() } else { path }, e.into_inner().message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, then applies the environment overrides.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.display().to_string(), message: e.to_string() })?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.apply_env(|k| std::env::var(k).ok());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        if let Some(dir) = lookup(ENV_DATA_DIR) {
            self.data_dir = PathBuf::from(dir);
        }
        if let Some(addr) = lookup(ENV_LISTEN) {
            self.listen_address = addr;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.listen_address
            .parse::<SocketAddr>()
            .map_err(|e| ConfigError::invalid("listen_address", e.to_string()))?;
        if self.data_dir.as_os_str().is_empty() {
            return Err(ConfigError::invalid("data_dir", "must be non-empty"));
        }
        self.workflow
            .validate()
            .map_err(|(field, msg)| ConfigError::invalid(format!("workflow.{field}"), msg))?;
        self.executor
            .validate()
            .map_err(|(field, msg)| ConfigError::invalid(format!("executor.{field}"), msg))?;
        let mut tokens = BTreeSet::new();
        let mut runner_systems = BTreeSet::new();
        for (i, p) in self.principals.iter().enumerate() {
            let at = |field: &str| format!("principals[{i}].{field}");
            if p.identity.trim().is_empty() {
                return Err(ConfigError::invalid(at("identity"), "must be non-empty"));
            }
            if p.token.trim().is_empty() {
                return Err(ConfigError::invalid(at("token"), "must be non-empty"));
            }
            if !tokens.insert(p.token.as_str()) {
                return Err(ConfigError::invalid(at("token"), "duplicate token"));
            }
            match (p.role, &p.system_id) {
                (RoleName::Runner, None) => {
                    return Err(ConfigError::invalid(at("system_id"), "runner principals need a system_id"))
                }
                (RoleName::Runner, Some(s)) => {
                    if !runner_systems.insert(s.clone()) {
                        return Err(ConfigError::invalid(at("system_id"), format!("second runner token for {s}")));
                    }
                }
                (_, Some(_)) => {
                    return Err(ConfigError::invalid(at("system_id"), "only runner principals bind to a system"))
                }
                (_, None) => {}
            }
        }
        for (i, s) in self.subscriptions.iter().enumerate() {
            if s.channel != "file" {
                return Err(ConfigError::invalid(format!("subscriptions[{i}].channel"), "only 'file' is available"));
            }
            if s.events.is_empty() {
                return Err(ConfigError::invalid(format!("subscriptions[{i}].events"), "must be non-empty"));
            }
        }
        Ok(())
    }

    pub fn principals(&self) -> Vec<Principal> {
        self.principals
            .iter()
            .map(|p| Principal {
                identity: p.identity.clone(),
                token: p.token.clone(),
                role: match (p.role, &p.system_id) {
                    (RoleName::Operator, _) => Role::Operator,
                    (RoleName::Reviewer, _) => Role::Reviewer,
                    (RoleName::Auditor, _) => Role::Auditor,
                    (RoleName::Runner, s) => Role::Runner(s.clone().unwrap_or_else(|| SystemId::from(""))),
                },
            })
            .collect()
    }

    pub fn virtual_start(&self) -> Timestamp {
        Timestamp(self.clock.start)
    }

    /// Creates the data directory and proves it is writable.
    pub fn prepare_data_dir(&self) -> Result<(), ConfigError> {
        let fail = |e: std::io::Error| ConfigError::invalid("data_dir", format!("{}: {e}", self.data_dir.display()));
        std::fs::create_dir_all(&self.data_dir).map_err(fail)?;
        let probe = self.data_dir.join(".write-probe");
        std::fs::write(&probe, b"ok").map_err(fail)?;
        std::fs::remove_file(&probe).map_err(fail)?;
        Ok(())
    }
}
