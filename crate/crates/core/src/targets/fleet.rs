//! Deterministic fleet of simulated target systems.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::executor::TargetMetadata;
use crate::ids::{JobId, PurposeId, SystemId};
use crate::registry::Registry;
use crate::time::{Timestamp, SECS_PER_DAY};
use crate::workflow::{RequestScope, SubjectKind, SubjectRef};

/// The identifiers a data subject may be addressed by on a target system.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubjectIdentity {
    pub user_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub email: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub business_id: Option<String>,
}

impl SubjectIdentity {
    pub fn matches(&self, subject: &SubjectRef) -> bool {
        match subject.kind {
            SubjectKind::UserId => self.user_id == subject.value,
            SubjectKind::Email => self.email.as_deref() == Some(subject.value.as_str()),
            SubjectKind::BusinessId => self.business_id.as_deref() == Some(subject.value.as_str()),
        }
    }
}

/// A subject in a fleet spec: either a bare user id or the full identity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SubjectSpec {
    User(String),
    Full(SubjectIdentity),
}

impl SubjectSpec {
    pub fn identity(&self) -> SubjectIdentity {
        match self {
            SubjectSpec::User(u) => SubjectIdentity { user_id: u.clone(), email: None, business_id: None },
            SubjectSpec::Full(i) => i.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultMode {
    /// The runner reports error evidence for the job.
    #[default]
    Error,
    /// The runner silently abandons the job; its lease runs out.
    Hang,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailPattern {
    #[serde(default)]
    pub mode: FaultMode,
    /// Number of claims on this system that fail.
    pub fail_first: u32,
    #[serde(default = "default_fault_message")]
    pub message: String,
}

fn default_fault_message() -> String {
    "injected fault: connection refused".into()
}

/// Explicit records for fixtures that need exact ages or purposes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordSpec {
    pub subject: SubjectSpec,
    pub age_days: u32,
    #[serde(default)]
    pub purpose: Option<PurposeId>,
    #[serde(default = "one")]
    pub count: u32,
}

fn one() -> u32 {
    1
}

fn default_step_size() -> u32 {
    10
}

fn default_threshold() -> f64 {
    1.0
}

fn default_batch() -> u32 {
    5
}

fn default_age() -> (u32, u32) {
    (1, 365)
}

/// One system in a fleet spec. Times are seconds from the simulation epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub system_id: SystemId,
    #[serde(default)]
    pub record_count: u32,
    #[serde(default)]
    pub subjects: Vec<SubjectSpec>,
    /// Step function of (offset, level) points.
    #[serde(default)]
    pub load_curve: Vec<(i64, f64)>,
    #[serde(default = "default_threshold")]
    pub load_threshold: f64,
    #[serde(default)]
    pub etl_windows: Vec<(i64, i64)>,
    #[serde(default = "default_step_size")]
    pub step_size: u32,
    #[serde(default)]
    pub fail_pattern: Option<FailPattern>,
    #[serde(default = "default_batch")]
    pub etl_batch_size: u32,
    /// Subjects loaded by ETL in addition to `subjects`.
    #[serde(default)]
    pub etl_subjects: Vec<SubjectSpec>,
    /// Inclusive range of generated record ages in days.
    #[serde(default = "default_age")]
    pub record_age_days: (u32, u32),
    #[serde(default)]
    pub records: Vec<RecordSpec>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetSpec {
    pub systems: Vec<SystemSpec>,
}

impl FleetSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::MalformedSpec(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: u64,
    pub subject: SubjectIdentity,
    pub purpose: Option<PurposeId>,
    pub data_timestamp: Timestamp,
    pub loaded_at: Timestamp,
    pub payload: String,
}

impl Record {
    pub fn matches(&self, subject: &SubjectRef, purpose: Option<&PurposeId>) -> bool {
        self.subject.matches(subject) && purpose.is_none_or(|p| self.purpose.as_ref() == Some(p))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Claim,
    DeferLoad,
    DeferEtl,
    RenewLease,
    DeleteStep,
    Complete,
    Fault,
    Drop,
    EtlLoad,
}

/// One line of a system's action log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionEntry {
    pub t: Timestamp,
    pub action: ActionKind,
    pub job_id: Option<JobId>,
    pub detail: Value,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimulatedSystem {
    pub system_id: SystemId,
    pub records: Vec<Record>,
    pub load_curve: Vec<(Timestamp, f64)>,
    pub load_threshold: f64,
    pub etl_windows: Vec<(Timestamp, Timestamp)>,
    pub step_size: u32,
    pub fail_pattern: Option<FailPattern>,
    pub etl_batch_size: u32,
    pub etl_pool: Vec<SubjectIdentity>,
    pub purposes: Vec<PurposeId>,
    pub claims_seen: u32,
    pub deleted_total: u64,
    pub action_log: Vec<ActionEntry>,
    next_record_id: u64,
    #[serde(skip, default = "dummy_rng")]
    rng: ChaCha8Rng,
}

fn dummy_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

impl SimulatedSystem {
    /// Load level in effect at `now`: the last curve point at or before it.
    pub fn load_at(&self, now: Timestamp) -> f64 {
        self.load_curve
            .iter()
            .take_while(|(t, _)| *t <= now)
            .last()
            .map_or(0.0, |(_, l)| *l)
    }

    pub fn overloaded(&self, now: Timestamp) -> bool {
        self.load_at(now) > self.load_threshold
    }

    pub fn in_etl_window(&self, now: Timestamp) -> bool {
        self.etl_windows.iter().any(|(s, e)| *s <= now && now < *e)
    }

    pub fn matching<'a>(
        &'a self,
        subject: &'a SubjectRef,
        purpose: Option<&'a PurposeId>,
    ) -> impl Iterator<Item = &'a Record> + 'a {
        self.records.iter().filter(move |r| r.matches(subject, purpose))
    }

    pub fn count_matching(&self, subject: &SubjectRef, purpose: Option<&PurposeId>) -> usize {
        self.matching(subject, purpose).count()
    }

    /// Whether the next claim on this system hits the injected fault.
    pub fn fault_active(&self) -> Option<&FailPattern> {
        self.fail_pattern.as_ref().filter(|f| self.claims_seen < f.fail_first)
    }

    pub fn clear_faults(&mut self) {
        self.fail_pattern = None;
    }

    /// Deletes up to `limit` matching records, oldest first.
    pub fn delete_matching(&mut self, subject: &SubjectRef, purpose: Option<&PurposeId>, limit: usize) -> usize {
        let mut victims: Vec<(Timestamp, u64)> = self
            .matching(subject, purpose)
            .map(|r| (r.data_timestamp, r.id))
            .collect();
        victims.sort();
        victims.truncate(limit);
        let ids: BTreeSet<u64> = victims.into_iter().map(|(_, id)| id).collect();
        self.records.retain(|r| !ids.contains(&r.id));
        self.deleted_total += ids.len() as u64;
        ids.len()
    }

    pub fn log(&mut self, t: Timestamp, action: ActionKind, job_id: Option<&JobId>, detail: Value) {
        self.action_log.push(ActionEntry { t, action, job_id: job_id.cloned(), detail });
    }

    fn push_record(&mut self, subject: SubjectIdentity, purpose: Option<PurposeId>, data_timestamp: Timestamp, loaded_at: Timestamp) {
        let id = self.next_record_id;
        self.next_record_id += 1;
        self.records.push(Record { id, subject, purpose, data_timestamp, loaded_at, payload: format!("row-{id}") });
    }

    /// Loads one ETL batch when `now` is inside a window. Subjects in
    /// `blocked` (those with a deletion job in flight here) are never loaded.
    pub fn etl_tick(&mut self, now: Timestamp, blocked: &[SubjectRef]) -> u32 {
        if !self.in_etl_window(now) {
            return 0;
        }
        let pool: Vec<SubjectIdentity> = self
            .etl_pool
            .iter()
            .filter(|s| !blocked.iter().any(|b| s.matches(b)))
            .cloned()
            .collect();
        if pool.is_empty() {
            return 0;
        }
        let mut loaded = Vec::new();
        for _ in 0..self.etl_batch_size {
            let subject = pool.choose(&mut self.rng).expect("non-empty pool").clone();
            let purpose = self.purposes.choose(&mut self.rng).cloned();
            loaded.push(subject.clone());
            self.push_record(subject, purpose, now, now);
        }
        self.log(now, ActionKind::EtlLoad, None, json!({ "count": loaded.len(), "subjects": loaded }));
        loaded.len() as u32
    }

    /// Writes the action log as line-delimited JSON.
    pub fn write_action_log(&self, mut w: impl Write) -> std::io::Result<()> {
        for e in &self.action_log {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn check_spec(s: &SystemSpec) -> Result<()> {
    let bad = |m: String| Err(Error::MalformedSpec(format!("{}: {m}", s.system_id)));
    if s.step_size == 0 {
        return bad("step_size must be >= 1".into());
    }
    if !(0.0..=1.0).contains(&s.load_threshold) {
        return bad("load_threshold must be within [0, 1]".into());
    }
    if s.load_curve.iter().any(|(_, l)| !(0.0..=1.0).contains(l)) {
        return bad("load levels must be within [0, 1]".into());
    }
    if s.load_curve.windows(2).any(|w| w[0].0 >= w[1].0) {
        return bad("load_curve points must have increasing times".into());
    }
    let mut windows = s.etl_windows.clone();
    windows.sort();
    for w in &windows {
        if w.0 >= w.1 {
            return bad(format!("etl window ({}, {}) is empty", w.0, w.1));
        }
    }
    for pair in windows.windows(2) {
        if pair[1].0 < pair[0].1 {
            return bad(format!("etl windows {:?} and {:?} overlap", pair[0], pair[1]));
        }
    }
    if s.record_count > 0 && s.subjects.is_empty() {
        return bad("record_count > 0 needs at least one subject".into());
    }
    if s.record_age_days.0 > s.record_age_days.1 {
        return bad("record_age_days range is inverted".into());
    }
    Ok(())
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Fleet {
    pub systems: BTreeMap<SystemId, SimulatedSystem>,
}

impl Fleet {
    /// Builds the fleet for `spec`. Everything random derives from `seed`,
    /// so the same inputs give the same fleet.
    pub fn seed(spec: &FleetSpec, registry: &Registry, seed: u64, epoch: Timestamp) -> Result<Fleet> {
        let mut systems = BTreeMap::new();
        for (i, s) in spec.systems.iter().enumerate() {
            let Some(inst) = registry.system(&s.system_id) else {
                return Err(Error::UnknownSystem(s.system_id.to_string()));
            };
            check_spec(s)?;
            if systems.contains_key(&s.system_id) {
                return Err(Error::MalformedSpec(format!("{} appears twice", s.system_id)));
            }
            let purposes: Vec<PurposeId> = registry
                .system_type(&inst.record.system_type)
                .map(|t| t.record.purposes.iter().cloned().collect())
                .unwrap_or_default();
            let subjects: Vec<SubjectIdentity> = s.subjects.iter().map(SubjectSpec::identity).collect();
            let mut etl_pool = subjects.clone();
            etl_pool.extend(s.etl_subjects.iter().map(SubjectSpec::identity));
            let mut sys = SimulatedSystem {
                system_id: s.system_id.clone(),
                records: Vec::new(),
                load_curve: s.load_curve.iter().map(|(t, l)| (epoch.plus_secs(*t), *l)).collect(),
                load_threshold: s.load_threshold,
                etl_windows: {
                    let mut w: Vec<_> = s.etl_windows.iter().map(|(a, b)| (epoch.plus_secs(*a), epoch.plus_secs(*b))).collect();
                    w.sort();
                    w
                },
                step_size: s.step_size,
                fail_pattern: s.fail_pattern.clone(),
                etl_batch_size: s.etl_batch_size,
                etl_pool,
                purposes,
                claims_seen: 0,
                deleted_total: 0,
                action_log: Vec::new(),
                next_record_id: 0,
                rng: ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1))),
            };
            for _ in 0..s.record_count {
                let subject = subjects.choose(&mut sys.rng).expect("checked non-empty").clone();
                let age = sys.rng.gen_range(s.record_age_days.0..=s.record_age_days.1) as i64;
                let jitter = sys.rng.gen_range(0..SECS_PER_DAY);
                let purpose = sys.purposes.choose(&mut sys.rng).cloned();
                let ts = epoch.minus_days(age).plus_secs(-jitter).min(epoch);
                sys.push_record(subject, purpose, ts, epoch);
            }
            for r in &s.records {
                for _ in 0..r.count {
                    sys.push_record(r.subject.identity(), r.purpose.clone(), epoch.minus_days(r.age_days as i64), epoch);
                }
            }
            systems.insert(s.system_id.clone(), sys);
        }
        Ok(Fleet { systems })
    }

    pub fn system(&self, id: &SystemId) -> Option<&SimulatedSystem> {
        self.systems.get(id)
    }

    pub fn system_mut(&mut self, id: &SystemId) -> Option<&mut SimulatedSystem> {
        self.systems.get_mut(id)
    }

    /// Writes one `<system>.actions.jsonl` file per system into `dir`.
    pub fn write_action_logs(&self, dir: impl AsRef<Path>) -> Result<()> {
        std::fs::create_dir_all(dir.as_ref())?;
        for (id, s) in &self.systems {
            let f = std::fs::File::create(dir.as_ref().join(format!("{id}.actions.jsonl")))?;
            s.write_action_log(std::io::BufWriter::new(f))?;
        }
        Ok(())
    }
}

impl TargetMetadata for Fleet {
    fn oldest_record(&self, system: &SystemId, scope: &RequestScope) -> Option<Timestamp> {
        self.systems
            .get(system)?
            .matching(&scope.subject, scope.purpose_filter.as_ref())
            .map(|r| r.data_timestamp)
            .min()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{DeletionDirective, Purpose, RegistryEntity, SystemInstance, SystemType};

    fn registry(n: usize) -> Registry {
        let mut r = Registry::new();
        let mut reg = |e| {
            let e = r.prepare_registration(e).unwrap();
            r.apply_registered(e);
        };
        reg(RegistryEntity::Purpose(Purpose { id: "marketing".into(), name: "marketing".into(), description: String::new() }));
        reg(RegistryEntity::DataCategory(crate::registry::DataCategory { id: "ip".into(), name: "ip".into() }));
        reg(RegistryEntity::SystemType(SystemType {
            id: "db".into(),
            name: "db".into(),
            data_categories: ["ip".into()].into(),
            purposes: ["marketing".into()].into(),
        }));
        for i in 0..n {
            reg(RegistryEntity::System(SystemInstance {
                id: format!("sys-{i}").into(),
                system_type: "db".into(),
                name: format!("sys-{i}"),
                geo_region: "eu".into(),
                datacenter_id: "dc".into(),
                system_owner: "o".into(),
                business_owner: "b".into(),
                directive: DeletionDirective::new("mgmt", "pg-wipe", "^1.0", Default::default()).unwrap(),
                retention_policy_ids: Default::default(),
                active: true,
            }));
        }
        r
    }

    fn spec(id: &str, subjects: &[&str], count: u32) -> SystemSpec {
        serde_json::from_value(json!({
            "system_id": id,
            "record_count": count,
            "subjects": subjects,
        }))
        .unwrap()
    }

    #[test]
    fn same_seed_same_fleet() {
        let r = registry(3);
        let fs = FleetSpec { systems: (0..3).map(|i| spec(&format!("sys-{i}"), &["u-1", "u-2"], 20)).collect() };
        let a = Fleet::seed(&fs, &r, 42, Timestamp(1_000_000_000)).unwrap();
        let b = Fleet::seed(&fs, &r, 42, Timestamp(1_000_000_000)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn overlapping_windows_rejected() {
        let r = registry(1);
        let mut s = spec("sys-0", &["u-1"], 1);
        s.etl_windows = vec![(0, 100), (50, 150)];
        let err = Fleet::seed(&FleetSpec { systems: vec![s] }, &r, 1, Timestamp(0)).unwrap_err();
        assert!(matches!(err, Error::MalformedSpec(_)));
    }

    #[test]
    fn unknown_system_rejected() {
        let r = registry(1);
        let err = Fleet::seed(&FleetSpec { systems: vec![spec("nope", &[], 0)] }, &r, 1, Timestamp(0)).unwrap_err();
        assert!(matches!(err, Error::UnknownSystem(_)));
    }

    #[test]
    fn subject_on_two_of_three_systems() {
        let r = registry(3);
        let fs = FleetSpec {
            systems: vec![spec("sys-0", &["u-42"], 3), spec("sys-1", &["u-42", "u-7"], 9), spec("sys-2", &["u-7"], 4)],
        };
        let f = Fleet::seed(&fs, &r, 9, Timestamp(1_000_000_000)).unwrap();
        let who = SubjectRef::user("u-42");
        let hits: Vec<_> = f
            .systems
            .values()
            .filter(|s| s.count_matching(&who, None) > 0)
            .map(|s| s.system_id.to_string())
            .collect();
        assert_eq!(hits.len(), 2);
        assert!(!hits.contains(&"sys-2".to_string()));
    }

    #[test]
    fn load_curve_is_a_step_function() {
        let r = registry(1);
        let mut s = spec("sys-0", &[], 0);
        s.load_curve = vec![(10, 0.9), (20, 0.1)];
        let f = Fleet::seed(&FleetSpec { systems: vec![s] }, &r, 1, Timestamp(0)).unwrap();
        let sys = f.system(&"sys-0".into()).unwrap();
        assert_eq!(sys.load_at(Timestamp(5)), 0.0);
        assert_eq!(sys.load_at(Timestamp(10)), 0.9);
        assert_eq!(sys.load_at(Timestamp(19)), 0.9);
        assert_eq!(sys.load_at(Timestamp(500)), 0.1);
    }

    #[test]
    fn etl_only_inside_windows_and_skips_blocked() {
        let r = registry(1);
        let mut s = spec("sys-0", &["u-1", "u-2"], 0);
        s.etl_windows = vec![(100, 200)];
        let mut f = Fleet::seed(&FleetSpec { systems: vec![s] }, &r, 1, Timestamp(0)).unwrap();
        let sys = f.system_mut(&"sys-0".into()).unwrap();
        assert_eq!(sys.etl_tick(Timestamp(99), &[]), 0);
        assert_eq!(sys.etl_tick(Timestamp(200), &[]), 0);
        assert_eq!(sys.etl_tick(Timestamp(150), &[SubjectRef::user("u-1")]), 5);
        assert_eq!(sys.count_matching(&SubjectRef::user("u-1"), None), 0);
        assert_eq!(sys.count_matching(&SubjectRef::user("u-2"), None), 5);
    }

    #[test]
    fn purpose_filter_only_touches_tagged_records() {
        let r = registry(1);
        let mut s = spec("sys-0", &[], 0);
        s.records = vec![
            RecordSpec { subject: SubjectSpec::User("u-1".into()), age_days: 3, purpose: Some("marketing".into()), count: 2 },
            RecordSpec { subject: SubjectSpec::User("u-1".into()), age_days: 3, purpose: None, count: 3 },
        ];
        let mut f = Fleet::seed(&FleetSpec { systems: vec![s] }, &r, 1, Timestamp(1_000_000)).unwrap();
        let sys = f.system_mut(&"sys-0".into()).unwrap();
        let who = SubjectRef::user("u-1");
        let mk: PurposeId = "marketing".into();
        assert_eq!(sys.delete_matching(&who, Some(&mk), usize::MAX), 2);
        assert_eq!(sys.count_matching(&who, None), 3);
    }
}
