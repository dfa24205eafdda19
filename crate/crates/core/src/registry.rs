//! System and data registry.
//!
//! Maps purposes and data categories to system types, and system types to the
//! concrete instances that hold personal data. Each instance carries the
//! directive describing how to delete from it and the retention policies that
//! may override a deletion.
//!
//! The registry is pure state: `check_*`/`prepare_*` methods validate a change
//! and `apply_*` methods mutate. [`crate::service::Service`] stitches the two
//! together through the event log.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{DataCategoryId, PolicyId, PurposeId, SystemId, SystemTypeId};
use crate::plugins::VersionConstraint;
use crate::workflow::RequestScope;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Purpose {
    #[serde(default)]
    pub id: PurposeId,
    pub name: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataCategory {
    #[serde(default)]
    pub id: DataCategoryId,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemType {
    #[serde(default)]
    pub id: SystemTypeId,
    pub name: String,
    pub data_categories: BTreeSet<DataCategoryId>,
    pub purposes: BTreeSet<PurposeId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeletionDirective {
    pub management_endpoint: String,
    pub plugin_name: String,
    pub plugin_version_req: VersionConstraint,
    #[serde(default)]
    pub plugin_config: BTreeMap<String, String>,
}

impl DeletionDirective {
    pub fn new(
        management_endpoint: impl Into<String>,
        plugin_name: impl Into<String>,
        plugin_version_req: &str,
        plugin_config: BTreeMap<String, String>,
    ) -> Result<Self> {
        let d = DeletionDirective {
            management_endpoint: management_endpoint.into(),
            plugin_name: plugin_name.into(),
            plugin_version_req: plugin_version_req.parse()?,
            plugin_config,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.plugin_name.trim().is_empty() {
            return Err(Error::Malformed("directive plugin_name must be non-empty".into()));
        }
        Ok(())
    }
}

fn default_active() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemInstance {
    #[serde(default)]
    pub id: SystemId,
    pub system_type: SystemTypeId,
    pub name: String,
    pub geo_region: String,
    pub datacenter_id: String,
    pub system_owner: String,
    pub business_owner: String,
    pub directive: DeletionDirective,
    #[serde(default)]
    pub retention_policy_ids: BTreeSet<PolicyId>,
    #[serde(default = "default_active")]
    pub active: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionPolicy {
    #[serde(default)]
    pub id: PolicyId,
    pub label: String,
    /// Minimum retention in days.
    pub min_retention: u32,
    #[serde(default)]
    pub purpose_scope: Option<PurposeId>,
    #[serde(default)]
    pub legal_basis: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "record", rename_all = "snake_case")]
pub enum RegistryEntity {
    Purpose(Purpose),
    DataCategory(DataCategory),
    SystemType(SystemType),
    System(SystemInstance),
    RetentionPolicy(RetentionPolicy),
}

impl RegistryEntity {
    pub fn kind(&self) -> &'static str {
        match self {
            RegistryEntity::Purpose(_) => "purpose",
            RegistryEntity::DataCategory(_) => "data_category",
            RegistryEntity::SystemType(_) => "system_type",
            RegistryEntity::System(_) => "system",
            RegistryEntity::RetentionPolicy(_) => "retention_policy",
        }
    }

    pub fn id(&self) -> &str {
        match self {
            RegistryEntity::Purpose(p) => p.id.as_str(),
            RegistryEntity::DataCategory(c) => c.id.as_str(),
            RegistryEntity::SystemType(t) => t.id.as_str(),
            RegistryEntity::System(s) => s.id.as_str(),
            RegistryEntity::RetentionPolicy(p) => p.id.as_str(),
        }
    }
}

/// A registry record with its monotone version.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Versioned<T> {
    pub version: u64,
    pub record: T,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    purposes: BTreeMap<PurposeId, Versioned<Purpose>>,
    data_categories: BTreeMap<DataCategoryId, Versioned<DataCategory>>,
    system_types: BTreeMap<SystemTypeId, Versioned<SystemType>>,
    systems: BTreeMap<SystemId, Versioned<SystemInstance>>,
    retention_policies: BTreeMap<PolicyId, Versioned<RetentionPolicy>>,
    #[serde(default)]
    mutations: u64,
}

fn non_empty(field: &str, value: &str) -> Result<()> {
    if value.trim().is_empty() {
        Err(Error::Malformed(format!("{field} must be non-empty")))
    } else {
        Ok(())
    }
}

fn next_free_id(prefix: &str, taken: impl Fn(&str) -> bool, start: usize) -> String {
    let mut n = start + 1;
    loop {
        let candidate = format!("{prefix}-{n:03}");
        if !taken(&candidate) {
            return candidate;
        }
        n += 1;
    }
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Validates `entity`, assigning a fresh id when it has none.
    pub fn prepare_registration(&self, entity: RegistryEntity) -> Result<RegistryEntity> {
        let dup = |kind: &'static str, id: &str| Error::DuplicateId {
            kind,
            id: id.to_string(),
        };
        match entity {
            RegistryEntity::Purpose(mut p) => {
                non_empty("purpose name", &p.name)?;
                if p.id.is_empty() {
                    p.id = next_free_id("purpose", |c| self.purposes.contains_key(&PurposeId::from(c)), self.purposes.len()).into();
                } else if self.purposes.contains_key(&p.id) {
                    return Err(dup("purpose", p.id.as_str()));
                }
                Ok(RegistryEntity::Purpose(p))
            }
            RegistryEntity::DataCategory(mut c) => {
                non_empty("data category name", &c.name)?;
                if c.id.is_empty() {
                    c.id = next_free_id("category", |x| self.data_categories.contains_key(&DataCategoryId::from(x)), self.data_categories.len()).into();
                } else if self.data_categories.contains_key(&c.id) {
                    return Err(dup("data_category", c.id.as_str()));
                }
                Ok(RegistryEntity::DataCategory(c))
            }
            RegistryEntity::SystemType(mut t) => {
                non_empty("system type name", &t.name)?;
                if t.data_categories.is_empty() {
                    return Err(Error::Malformed("system type needs at least one data category".into()));
                }
                if t.purposes.is_empty() {
                    return Err(Error::Malformed("system type needs at least one purpose".into()));
                }
                for c in &t.data_categories {
                    if !self.data_categories.contains_key(c) {
                        return Err(Error::UnknownReference { kind: "data_category", id: c.to_string() });
                    }
                }
                for p in &t.purposes {
                    if !self.purposes.contains_key(p) {
                        return Err(Error::UnknownReference { kind: "purpose", id: p.to_string() });
                    }
                }
                if t.id.is_empty() {
                    t.id = next_free_id("systype", |x| self.system_types.contains_key(&SystemTypeId::from(x)), self.system_types.len()).into();
                } else if self.system_types.contains_key(&t.id) {
                    return Err(dup("system_type", t.id.as_str()));
                }
                Ok(RegistryEntity::SystemType(t))
            }
            RegistryEntity::System(mut s) => {
                non_empty("system name", &s.name)?;
                if !self.system_types.contains_key(&s.system_type) {
                    return Err(Error::UnknownReference { kind: "system_type", id: s.system_type.to_string() });
                }
                for p in &s.retention_policy_ids {
                    if !self.retention_policies.contains_key(p) {
                        return Err(Error::UnknownReference { kind: "retention_policy", id: p.to_string() });
                    }
                }
                if s.active {
                    s.directive.validate()?;
                }
                if s.id.is_empty() {
                    s.id = next_free_id("system", |x| self.systems.contains_key(&SystemId::from(x)), self.systems.len()).into();
                } else if self.systems.contains_key(&s.id) {
                    return Err(dup("system", s.id.as_str()));
                }
                Ok(RegistryEntity::System(s))
            }
            RegistryEntity::RetentionPolicy(mut p) => {
                non_empty("retention policy label", &p.label)?;
                if p.min_retention == 0 {
                    return Err(Error::Malformed("min_retention must be > 0 days".into()));
                }
                if let Some(scope) = &p.purpose_scope {
                    if !self.purposes.contains_key(scope) {
                        return Err(Error::UnknownReference { kind: "purpose", id: scope.to_string() });
                    }
                }
                if p.id.is_empty() {
                    p.id = next_free_id("policy", |x| self.retention_policies.contains_key(&PolicyId::from(x)), self.retention_policies.len()).into();
                } else if self.retention_policies.contains_key(&p.id) {
                    return Err(dup("retention_policy", p.id.as_str()));
                }
                Ok(RegistryEntity::RetentionPolicy(p))
            }
        }
    }

    pub(crate) fn apply_registered(&mut self, entity: RegistryEntity) {
        match entity {
            RegistryEntity::Purpose(p) => {
                self.purposes.insert(p.id.clone(), Versioned { version: 1, record: p });
            }
            RegistryEntity::DataCategory(c) => {
                self.data_categories.insert(c.id.clone(), Versioned { version: 1, record: c });
            }
            RegistryEntity::SystemType(t) => {
                self.system_types.insert(t.id.clone(), Versioned { version: 1, record: t });
            }
            RegistryEntity::System(s) => {
                self.systems.insert(s.id.clone(), Versioned { version: 1, record: s });
            }
            RegistryEntity::RetentionPolicy(p) => {
                self.retention_policies.insert(p.id.clone(), Versioned { version: 1, record: p });
            }
        }
        self.mutations += 1;
    }

    /// Active systems matching `scope`, ordered by `(geo_region, id)`.
    ///
    /// Subject-only scopes select every active instance; a purpose filter keeps
    /// instances whose system type serves that purpose.
    pub fn systems_for_scope(&self, scope: &RequestScope) -> Result<Vec<&SystemInstance>> {
        if let Some(p) = &scope.purpose_filter {
            if !self.purposes.contains_key(p) {
                return Err(Error::UnknownPurpose(p.to_string()));
            }
        }
        let mut out: Vec<&SystemInstance> = self
            .systems
            .values()
            .map(|v| &v.record)
            .filter(|s| s.active)
            .filter(|s| match &scope.purpose_filter {
                None => true,
                Some(p) => self
                    .system_types
                    .get(&s.system_type)
                    .is_some_and(|t| t.record.purposes.contains(p)),
            })
            .collect();
        out.sort_by(|a, b| (&a.geo_region, &a.id).cmp(&(&b.geo_region, &b.id)));
        Ok(out)
    }

    pub fn deletion_directive(&self, system_id: &SystemId) -> Result<&DeletionDirective> {
        let s = self.system_record(system_id)?;
        if !s.active {
            return Err(Error::InactiveSystem(system_id.to_string()));
        }
        Ok(&s.directive)
    }

    /// Returns the version the record will carry after the update.
    pub fn check_directive_update(&self, system_id: &SystemId, directive: &DeletionDirective) -> Result<u64> {
        let v = self
            .systems
            .get(system_id)
            .ok_or_else(|| Error::UnknownSystem(system_id.to_string()))?;
        directive.validate()?;
        Ok(v.version + 1)
    }

    pub(crate) fn apply_directive_updated(&mut self, system_id: &SystemId, directive: DeletionDirective, version: u64) {
        if let Some(v) = self.systems.get_mut(system_id) {
            v.record.directive = directive;
            v.version = version;
        }
        self.mutations += 1;
    }

    pub fn check_activation(&self, system_id: &SystemId, active: bool) -> Result<u64> {
        let v = self
            .systems
            .get(system_id)
            .ok_or_else(|| Error::UnknownSystem(system_id.to_string()))?;
        if active {
            v.record.directive.validate()?;
        }
        Ok(v.version + 1)
    }

    pub(crate) fn apply_activation(&mut self, system_id: &SystemId, active: bool, version: u64) {
        if let Some(v) = self.systems.get_mut(system_id) {
            v.record.active = active;
            v.version = version;
        }
        self.mutations += 1;
    }

    /// Policies linked to the system. With a purpose filter, policies scoped to
    /// a different purpose are dropped; unscoped policies always apply.
    pub fn policies_for(&self, system_id: &SystemId, purpose: Option<&PurposeId>) -> Result<Vec<&RetentionPolicy>> {
        let s = self.system_record(system_id)?;
        Ok(s.retention_policy_ids
            .iter()
            .filter_map(|id| self.retention_policies.get(id).map(|v| &v.record))
            .filter(|p| match (purpose, &p.purpose_scope) {
                (Some(want), Some(scope)) => want == scope,
                _ => true,
            })
            .collect())
    }

    pub fn system(&self, id: &SystemId) -> Option<&Versioned<SystemInstance>> {
        self.systems.get(id)
    }

    fn system_record(&self, id: &SystemId) -> Result<&SystemInstance> {
        self.systems
            .get(id)
            .map(|v| &v.record)
            .ok_or_else(|| Error::UnknownSystem(id.to_string()))
    }

    pub fn purpose(&self, id: &PurposeId) -> Option<&Versioned<Purpose>> {
        self.purposes.get(id)
    }

    pub fn data_category(&self, id: &DataCategoryId) -> Option<&Versioned<DataCategory>> {
        self.data_categories.get(id)
    }

    pub fn system_type(&self, id: &SystemTypeId) -> Option<&Versioned<SystemType>> {
        self.system_types.get(id)
    }

    pub fn retention_policy(&self, id: &PolicyId) -> Option<&Versioned<RetentionPolicy>> {
        self.retention_policies.get(id)
    }

    pub fn purposes(&self) -> impl Iterator<Item = &Versioned<Purpose>> {
        self.purposes.values()
    }

    pub fn data_categories(&self) -> impl Iterator<Item = &Versioned<DataCategory>> {
        self.data_categories.values()
    }

    pub fn system_types(&self) -> impl Iterator<Item = &Versioned<SystemType>> {
        self.system_types.values()
    }

    pub fn systems(&self) -> impl Iterator<Item = &Versioned<SystemInstance>> {
        self.systems.values()
    }

    pub fn retention_policies(&self) -> impl Iterator<Item = &Versioned<RetentionPolicy>> {
        self.retention_policies.values()
    }

    pub fn is_empty(&self) -> bool {
        self.purposes.is_empty()
            && self.data_categories.is_empty()
            && self.system_types.is_empty()
            && self.systems.is_empty()
            && self.retention_policies.is_empty()
    }

    pub fn mutations(&self) -> u64 {
        self.mutations
    }

    /// Full scan for dangling references; empty when the registry is consistent.
    pub fn integrity_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for t in self.system_types.values().map(|v| &v.record) {
            for c in t.data_categories.iter().filter(|c| !self.data_categories.contains_key(*c)) {
                out.push(format!("system_type {} -> data_category {c}", t.id));
            }
            for p in t.purposes.iter().filter(|p| !self.purposes.contains_key(*p)) {
                out.push(format!("system_type {} -> purpose {p}", t.id));
            }
        }
        for s in self.systems.values().map(|v| &v.record) {
            if !self.system_types.contains_key(&s.system_type) {
                out.push(format!("system {} -> system_type {}", s.id, s.system_type));
            }
            for p in s.retention_policy_ids.iter().filter(|p| !self.retention_policies.contains_key(*p)) {
                out.push(format!("system {} -> retention_policy {p}", s.id));
            }
        }
        for p in self.retention_policies.values().map(|v| &v.record) {
            if let Some(scope) = p.purpose_scope.as_ref().filter(|s| !self.purposes.contains_key(*s)) {
                out.push(format!("retention_policy {} -> purpose {scope}", p.id));
            }
        }
        out
    }
}

/// JSON seed document loaded at boot.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrySeed {
    #[serde(default)]
    pub purposes: Vec<Purpose>,
    #[serde(default)]
    pub data_categories: Vec<DataCategory>,
    #[serde(default)]
    pub system_types: Vec<SystemType>,
    #[serde(default)]
    pub systems: Vec<SystemInstance>,
    #[serde(default)]
    pub retention_policies: Vec<RetentionPolicy>,
}

impl RegistrySeed {
    /// Parses a seed document; decode errors carry the JSON path and line.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let inner = e.inner();
            Error::Malformed(format!(
                "seed {} (line {}, column {}): {}",
                e.path(),
                inner.line(),
                inner.column(),
                inner
            ))
        })
    }

    /// Validates the whole seed against `base` and returns the entities to
    /// register, in dependency order. Nothing is returned unless every entry
    /// is valid; the error names the offending entry.
    pub fn validate_against(&self, base: &Registry) -> Result<Vec<RegistryEntity>> {
        let mut scratch = base.clone();
        let mut out = Vec::new();
        let groups: [(&str, Vec<RegistryEntity>); 5] = [
            ("purposes", self.purposes.iter().cloned().map(RegistryEntity::Purpose).collect()),
            ("data_categories", self.data_categories.iter().cloned().map(RegistryEntity::DataCategory).collect()),
            ("retention_policies", self.retention_policies.iter().cloned().map(RegistryEntity::RetentionPolicy).collect()),
            ("system_types", self.system_types.iter().cloned().map(RegistryEntity::SystemType).collect()),
            ("systems", self.systems.iter().cloned().map(RegistryEntity::System).collect()),
        ];
        for (field, entities) in groups {
            for (i, e) in entities.into_iter().enumerate() {
                let prepared = scratch
                    .prepare_registration(e)
                    .map_err(|err| Error::Malformed(format!("seed {field}[{i}]: {err}")))?;
                scratch.apply_registered(prepared.clone());
                out.push(prepared);
            }
        }
        Ok(out)
    }
}
