//! Static bearer-token principals and role checks.

use std::collections::BTreeMap;

use erasure_core::ids::SystemId;
use erasure_core::management::{RunnerCredential, Vault};
use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum Role {
    Operator,
    Reviewer,
    Auditor,
    /// Runner token bound to exactly one system.
    Runner(SystemId),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Principal {
    pub identity: String,
    #[serde(skip)]
    pub token: String,
    pub role: Role,
}

impl Principal {
    pub fn is(&self, roles: &[RoleKind]) -> bool {
        roles.contains(&self.role.kind())
    }

    pub fn runs(&self, system: &SystemId) -> bool {
        matches!(&self.role, Role::Runner(s) if s == system)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoleKind {
    Operator,
    Reviewer,
    Auditor,
    Runner,
}

impl Role {
    pub fn kind(&self) -> RoleKind {
        match self {
            Role::Operator => RoleKind::Operator,
            Role::Reviewer => RoleKind::Reviewer,
            Role::Auditor => RoleKind::Auditor,
            Role::Runner(_) => RoleKind::Runner,
        }
    }
}

/// Principals keyed by token.
#[derive(Clone, Debug, Default)]
pub struct Directory {
    by_token: BTreeMap<String, Principal>,
}

impl Directory {
    pub fn new(principals: impl IntoIterator<Item = Principal>) -> Self {
        Directory { by_token: principals.into_iter().map(|p| (p.token.clone(), p)).collect() }
    }

    pub fn lookup(&self, token: &str) -> Option<&Principal> {
        self.by_token.get(token)
    }

    /// One vault entry per runner principal; the token is the runner's credential.
    pub fn vault(&self) -> Vault {
        let mut vault = Vault::new();
        for p in self.by_token.values() {
            if let Role::Runner(system) = &p.role {
                vault.insert(
                    system.clone(),
                    RunnerCredential { runner_token: p.token.clone(), credential_ref: format!("vault:{system}") },
                );
            }
        }
        vault
    }
}

/// Extracts the token from an `Authorization: Bearer <token>` header value.
pub fn bearer(header: &str) -> Option<&str> {
    let (scheme, token) = header.split_once(' ')?;
    scheme.eq_ignore_ascii_case("bearer").then(|| token.trim()).filter(|t| !t.is_empty())
}
