//! Versioned plugin repository and version-constraint resolution.
//!
//! Runners resolve a directive's constraint against this repository when they
//! claim a job, so publishing a new version only affects jobs claimed later.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use semver::{Op, Version, VersionReq};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::time::Timestamp;

/// Exact (`2.0.0`), caret-compatible (`^1.2`) or `latest`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum VersionConstraint {
    Latest,
    Exact(Version),
    Caret(VersionReq),
}

impl VersionConstraint {
    pub fn matches(&self, v: &Version) -> bool {
        match self {
            VersionConstraint::Latest => true,
            VersionConstraint::Exact(want) => want == v,
            VersionConstraint::Caret(req) => req.matches(v),
        }
    }
}

impl FromStr for VersionConstraint {
    type Err = Error;

    fn from_str(raw: &str) -> Result<Self> {
        let s = raw.trim();
        let bad = |why: &str| Error::Malformed(format!("version constraint '{raw}': {why}"));
        if s.eq_ignore_ascii_case("latest") {
            return Ok(VersionConstraint::Latest);
        }
        if s.starts_with('^') {
            let req = VersionReq::parse(s).map_err(|e| bad(&e.to_string()))?;
            if req.comparators.len() != 1 || req.comparators[0].op != Op::Caret {
                return Err(bad("only a single caret comparator is supported"));
            }
            return Ok(VersionConstraint::Caret(req));
        }
        let exact = s.strip_prefix('=').unwrap_or(s);
        Version::parse(exact)
            .map(VersionConstraint::Exact)
            .map_err(|e| bad(&e.to_string()))
    }
}

impl TryFrom<String> for VersionConstraint {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<VersionConstraint> for String {
    fn from(c: VersionConstraint) -> String {
        c.to_string()
    }
}

impl fmt::Display for VersionConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VersionConstraint::Latest => f.write_str("latest"),
            VersionConstraint::Exact(v) => write!(f, "{v}"),
            VersionConstraint::Caret(req) => write!(f, "{req}"),
        }
    }
}

/// Deletion behaviours a simulated plugin can run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinBehavior {
    /// Deletes up to the system's step size per execution step.
    StepwiseDelete,
    /// Deletes every matching record in a single step.
    BulkDelete,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorSpec {
    pub behavior: BuiltinBehavior,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PluginDescriptor {
    pub name: String,
    pub version: Version,
    pub checksum: String,
    pub behavior_spec: BehaviorSpec,
    pub published_at: Timestamp,
}

impl PluginDescriptor {
    /// Builds a descriptor whose checksum matches its artifact.
    pub fn new(
        name: impl Into<String>,
        version: Version,
        behavior_spec: BehaviorSpec,
        published_at: Timestamp,
    ) -> Self {
        let mut d = PluginDescriptor {
            name: name.into(),
            version,
            checksum: String::new(),
            behavior_spec,
            published_at,
        };
        d.checksum = d.artifact_checksum();
        d
    }

    /// The simulated artifact is the canonical JSON of name, version and behaviour.
    pub fn artifact_bytes(&self) -> Vec<u8> {
        #[derive(Serialize)]
        struct Artifact<'a> {
            name: &'a str,
            version: String,
            behavior_spec: &'a BehaviorSpec,
        }
        serde_json::to_vec(&Artifact {
            name: &self.name,
            version: self.version.to_string(),
            behavior_spec: &self.behavior_spec,
        })
        .expect("artifact serializes")
    }

    pub fn artifact_checksum(&self) -> String {
        format!("sha256:{}", hex::encode(Sha256::digest(self.artifact_bytes())))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PluginRepository {
    plugins: BTreeMap<String, BTreeMap<Version, PluginDescriptor>>,
    #[serde(default)]
    mutations: u64,
}

impl PluginRepository {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn check_publish(&self, d: &PluginDescriptor) -> Result<()> {
        if d.name.trim().is_empty() {
            return Err(Error::Malformed("plugin name must be non-empty".into()));
        }
        if self
            .plugins
            .get(&d.name)
            .is_some_and(|vs| vs.contains_key(&d.version))
        {
            return Err(Error::DuplicateVersion {
                name: d.name.clone(),
                version: d.version.to_string(),
            });
        }
        if d.checksum != d.artifact_checksum() {
            return Err(Error::ChecksumMismatch {
                name: d.name.clone(),
                version: d.version.to_string(),
            });
        }
        Ok(())
    }

    pub(crate) fn apply_published(&mut self, d: PluginDescriptor) {
        self.plugins
            .entry(d.name.clone())
            .or_default()
            .insert(d.version.clone(), d);
        self.mutations += 1;
    }

    /// Highest published version satisfying `req`.
    pub fn resolve(&self, name: &str, req: &VersionConstraint) -> Result<&PluginDescriptor> {
        self.resolve_where(name, req, |_| true)
    }

    /// Like [`resolve`](Self::resolve) but only considering versions published at or before `t`.
    pub fn resolve_as_of(
        &self,
        name: &str,
        req: &VersionConstraint,
        t: Timestamp,
    ) -> Result<&PluginDescriptor> {
        self.resolve_where(name, req, |d| d.published_at <= t)
    }

    fn resolve_where(
        &self,
        name: &str,
        req: &VersionConstraint,
        visible: impl Fn(&PluginDescriptor) -> bool,
    ) -> Result<&PluginDescriptor> {
        self.plugins
            .get(name)
            .and_then(|vs| {
                vs.values()
                    .rev()
                    .find(|d| visible(d) && req.matches(&d.version))
            })
            .ok_or_else(|| Error::NoMatchingVersion {
                name: name.to_string(),
                req: req.to_string(),
            })
    }

    pub fn get(&self, name: &str, version: &Version) -> Option<&PluginDescriptor> {
        self.plugins.get(name)?.get(version)
    }

    pub fn versions(&self, name: &str) -> Vec<&PluginDescriptor> {
        self.plugins
            .get(name)
            .map(|vs| vs.values().collect())
            .unwrap_or_default()
    }

    pub fn all(&self) -> impl Iterator<Item = &PluginDescriptor> {
        self.plugins.values().flat_map(|vs| vs.values())
    }

    pub fn mutations(&self) -> u64 {
        self.mutations
    }
}
