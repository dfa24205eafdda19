//! The service: module state, the event log, and the command surface.
//!
//! Every command validates against current state, commits the resulting
//! events to the log, and only then applies them. Replaying the log folds
//! the same `apply` calls, so recovered state equals live state.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::events::{DomainEvent, PluginEvent, RegistryEvent};
use crate::ids::{JobId, PurposeId, RequestId, RunnerId, SubTaskId, SystemId};
use crate::management::{DeletionJob, Management, ManagementEvent, Vault, DEFAULT_LEASE_SECS, DEFAULT_MAX_REQUEUES};
use crate::notify::Notifier;
use crate::plugins::{PluginDescriptor, PluginRepository, VersionConstraint};
use crate::policy::{evaluate_retention, ExemptionClaim, RetentionDecision};
use crate::registry::{DeletionDirective, Registry, RegistryEntity, RegistrySeed};
use crate::store::{read_log, AuditEvent, DigestAlgorithm, EntityRef, EventRecord, LogEntry, Snapshot, Store};
use crate::time::Timestamp;
use crate::workflow::{
    ErasureRequest, Evidence, Origin, ProgressStatus, RequestScope, RequestState, ReviewDecision, SubTask, Workflow,
    WorkflowEvent,
};

pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const LOG_FILE: &str = "audit.log";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub sla_days: u32,
    pub approval_quorum: u32,
    /// Close a request as soon as its last sub-task closes; otherwise an
    /// operator closes it.
    pub auto_close: bool,
    pub lease_secs: u64,
    pub max_requeues: u32,
    pub digest: DigestAlgorithm,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            sla_days: 30,
            approval_quorum: 1,
            auto_close: true,
            lease_secs: DEFAULT_LEASE_SECS,
            max_requeues: DEFAULT_MAX_REQUEUES,
            digest: DigestAlgorithm::Sha256,
        }
    }
}

impl Settings {
    /// Returns the dotted path of the first invalid field.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.sla_days == 0 {
            return Err(("sla_days", "must be > 0".into()));
        }
        if self.approval_quorum == 0 {
            return Err(("approval_quorum", "must be >= 1".into()));
        }
        if self.lease_secs == 0 {
            return Err(("lease_secs", "must be > 0".into()));
        }
        Ok(())
    }
}

/// All module state. Serializable for snapshots and comparable for replay checks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub registry: Registry,
    pub plugins: PluginRepository,
    pub workflow: Workflow,
    pub management: Management,
}

impl State {
    pub fn apply(&mut self, event: &DomainEvent) {
        match event {
            DomainEvent::Registry(RegistryEvent::Registered { entity }) => self.registry.apply_registered(entity.clone()),
            DomainEvent::Registry(RegistryEvent::DirectiveUpdated { system_id, directive, version }) => {
                self.registry.apply_directive_updated(system_id, directive.clone(), *version)
            }
            DomainEvent::Registry(RegistryEvent::ActivationChanged { system_id, active, version }) => {
                self.registry.apply_activation(system_id, *active, *version)
            }
            DomainEvent::Plugins(PluginEvent::Published { descriptor }) => self.plugins.apply_published(descriptor.clone()),
            DomainEvent::Workflow(e) => self.workflow.apply(e),
            DomainEvent::Management(e) => self.management.apply(e),
        }
    }

    /// Transitions applied per module; their sum equals the audit count.
    pub fn transition_counts(&self) -> BTreeMap<&'static str, u64> {
        BTreeMap::from([
            ("registry", self.registry.mutations()),
            ("plugins", self.plugins.mutations()),
            ("workflow", self.workflow.mutations()),
            ("management", self.management.mutations()),
        ])
    }

    pub fn transition_total(&self) -> u64 {
        self.transition_counts().values().sum()
    }

    fn describe(&self, event: &DomainEvent) -> (String, EntityRef, &'static str, Value) {
        let entity = |kind: &str, id: &str| EntityRef { kind: kind.into(), id: id.into() };
        match event {
            DomainEvent::Registry(RegistryEvent::Registered { entity: e }) => (
                format!("registry:{}:{}", e.kind(), e.id()),
                entity(e.kind(), e.id()),
                "registry.registered",
                json!({ "version": 1 }),
            ),
            DomainEvent::Registry(RegistryEvent::DirectiveUpdated { system_id, directive, version }) => (
                format!("registry:system:{system_id}"),
                entity("system", system_id.as_str()),
                "registry.directive_updated",
                json!({
                    "version": version,
                    "plugin": directive.plugin_name,
                    "plugin_version_req": directive.plugin_version_req.to_string(),
                }),
            ),
            DomainEvent::Registry(RegistryEvent::ActivationChanged { system_id, active, version }) => (
                format!("registry:system:{system_id}"),
                entity("system", system_id.as_str()),
                if *active { "registry.activated" } else { "registry.deactivated" },
                json!({ "version": version }),
            ),
            DomainEvent::Plugins(PluginEvent::Published { descriptor }) => (
                format!("plugin:{}", descriptor.name),
                entity("plugin", &descriptor.name),
                "plugin.published",
                json!({ "version": descriptor.version.to_string(), "checksum": descriptor.checksum }),
            ),
            DomainEvent::Workflow(e) => {
                let request = e.request_id(&self.workflow).map(|r| r.to_string()).unwrap_or_default();
                let stream = format!("request:{request}");
                let (ent, detail) = match e {
                    WorkflowEvent::Submitted { request: r } => (
                        entity("request", r.id.as_str()),
                        json!({ "to": r.state, "subject": r.scope.subject.to_string(), "deadline": r.deadline }),
                    ),
                    WorkflowEvent::ReviewOpened { request_id, .. } => {
                        (entity("request", request_id.as_str()), json!({ "to": RequestState::UnderReview }))
                    }
                    WorkflowEvent::Reviewed { request_id, approval, state } => (
                        entity("request", request_id.as_str()),
                        json!({ "to": state, "reviewer": approval.reviewer, "decision": approval.decision }),
                    ),
                    WorkflowEvent::ExemptionRecorded { request_id, claim } => {
                        (entity("request", request_id.as_str()), json!({ "category": claim.category }))
                    }
                    WorkflowEvent::SubtasksOpened { request_id, subtasks, .. } => (
                        entity("request", request_id.as_str()),
                        json!({ "to": RequestState::Executing, "subtasks": subtasks.len() }),
                    ),
                    WorkflowEvent::SubtaskProgressed { subtask_id, state, job_id, step, .. } => (
                        entity("subtask", subtask_id.as_str()),
                        json!({ "to": state, "job_id": job_id, "step": step }),
                    ),
                    WorkflowEvent::SubtaskClosed { subtask_id, state, evidence, .. } => (
                        entity("subtask", subtask_id.as_str()),
                        json!({ "to": state, "evidence": evidence.kind, "records_affected": evidence.records_affected }),
                    ),
                    WorkflowEvent::RequestClosed { request_id, state, .. } => {
                        (entity("request", request_id.as_str()), json!({ "to": state }))
                    }
                    WorkflowEvent::SubtaskRetried { original, retry, reopened, .. } => (
                        entity("subtask", retry.id.as_str()),
                        json!({ "retry_of": original, "reopened": reopened }),
                    ),
                    WorkflowEvent::RequestOverdue { request_id, .. } => {
                        (entity("request", request_id.as_str()), json!({ "overdue": true }))
                    }
                };
                (stream, ent, e.action(), detail)
            }
            DomainEvent::Management(e) => {
                let job = e.job_id();
                let detail = match e {
                    ManagementEvent::Enqueued { job } => json!({ "system_id": job.system_id, "subtask_id": job.subtask_id }),
                    ManagementEvent::Claimed { runner, expires_at, .. } => json!({ "runner": runner, "expires_at": expires_at }),
                    ManagementEvent::Progressed { step, .. } => json!({ "step": step }),
                    ManagementEvent::LeaseRenewed { expires_at, .. } => json!({ "expires_at": expires_at }),
                    ManagementEvent::Completed { evidence, .. } | ManagementEvent::Exhausted { evidence, .. } => {
                        json!({ "evidence": evidence.kind })
                    }
                    ManagementEvent::Requeued { requeue_count, .. } => json!({ "requeue_count": requeue_count }),
                };
                (format!("job:{job}"), entity("job", job.as_str()), e.action(), detail)
            }
        }
    }
}

pub struct Service {
    state: State,
    store: Store,
    settings: Settings,
    vault: Vault,
    notifier: Notifier,
}

impl std::fmt::Debug for Service {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Service")
            .field("settings", &self.settings)
            .field("store", &self.store)
            .finish()
    }
}

impl Service {
    pub fn in_memory(settings: Settings) -> Self {
        let store = Store::in_memory(settings.digest);
        Service { state: State::default(), store, settings, vault: Vault::new(), notifier: Notifier::new() }
    }

    /// Rebuilds from a verified log, applying every event in order.
    pub fn from_store(store: Store, settings: Settings) -> Self {
        let mut state = State::default();
        for e in store.entries() {
            state.apply(&e.record.event);
        }
        Service { state, store, settings, vault: Vault::new(), notifier: Notifier::new() }
    }

    /// Rebuilds an in-memory service from raw log bytes. A torn or corrupt
    /// record is an error naming its seq.
    pub fn from_log_bytes(bytes: &[u8], settings: Settings) -> Result<Self> {
        let read = read_log(bytes);
        if let Some(e) = read.corruption {
            return Err(e);
        }
        Ok(Self::from_store(Store::from_entries(settings.digest, read.entries)?, settings))
    }

    /// Opens the file-backed service in `dir`, replaying the log. A snapshot
    /// is used as the starting state when it matches the log prefix.
    pub fn open(dir: impl AsRef<Path>, settings: Settings, fsync: bool) -> Result<Self> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let store = Store::open(dir.join(LOG_FILE), settings.digest, fsync)?;
        let snapshot = Snapshot::<State>::read(dir.join(SNAPSHOT_FILE)).unwrap_or_else(|e| {
            tracing::warn!(error = %e, "ignoring unreadable snapshot");
            None
        });
        let usable = snapshot.filter(|s| {
            s.seq <= store.len()
                && match s.seq.checked_sub(1) {
                    None => true,
                    Some(i) => store.entries()[i as usize].audit.hash == s.tail_hash,
                }
        });
        let (mut state, from) = match usable {
            Some(s) => (s.state, s.seq),
            None => (State::default(), 0),
        };
        for e in &store.entries()[from as usize..] {
            state.apply(&e.record.event);
        }
        Ok(Service { state, store, settings, vault: Vault::new(), notifier: Notifier::new() })
    }

    pub fn write_snapshot(&self, dir: impl AsRef<Path>) -> Result<()> {
        Snapshot { seq: self.store.len(), tail_hash: self.store.tail_hash().to_string(), state: self.state.clone() }
            .write(dir.as_ref().join(SNAPSHOT_FILE))
    }

    pub fn state(&self) -> &State {
        &self.state
    }

    pub fn registry(&self) -> &Registry {
        &self.state.registry
    }

    pub fn plugins(&self) -> &PluginRepository {
        &self.state.plugins
    }

    pub fn workflow(&self) -> &Workflow {
        &self.state.workflow
    }

    pub fn management(&self) -> &Management {
        &self.state.management
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut Store {
        &mut self.store
    }

    pub fn settings(&self) -> &Settings {
        &self.settings
    }

    pub fn vault(&self) -> &Vault {
        &self.vault
    }

    pub fn vault_mut(&mut self) -> &mut Vault {
        &mut self.vault
    }

    pub fn set_vault(&mut self, vault: Vault) {
        self.vault = vault;
    }

    pub fn notifier_mut(&mut self) -> &mut Notifier {
        &mut self.notifier
    }

    pub fn set_notifier(&mut self, notifier: Notifier) {
        self.notifier = notifier;
    }

    /// Records of one stream in log order.
    pub fn history(&self, stream: &str) -> Vec<&EventRecord> {
        self.store.replay(Some(stream))
    }

    pub fn log(&self) -> &[LogEntry] {
        self.store.entries()
    }

    fn commit(&mut self, actor: &str, now: Timestamp, event: DomainEvent) -> Result<u64> {
        let (stream, entity, action, detail) = self.state.describe(&event);
        let audit = AuditEvent {
            seq: 0,
            at: now,
            actor: actor.to_string(),
            entity,
            action: action.to_string(),
            detail,
            prev_hash: self.store.tail_hash().to_string(),
            hash: String::new(),
        };
        let seq = self.store.append(EventRecord { seq: 0, stream, event }, audit)?;
        let event = &self.store.entries()[seq as usize].record.event;
        self.state.apply(event);
        if let DomainEvent::Workflow(wf) = event {
            if let Some(req) = wf.request_id(&self.state.workflow) {
                self.notifier.observe(wf, req);
            }
        }
        Ok(seq)
    }

    fn commit_all(&mut self, actor: &str, now: Timestamp, events: Vec<DomainEvent>) -> Result<()> {
        for e in events {
            self.commit(actor, now, e)?;
        }
        Ok(())
    }

    // registry

    pub fn register_entity(&mut self, actor: &str, entity: RegistryEntity, now: Timestamp) -> Result<String> {
        let entity = self.state.registry.prepare_registration(entity)?;
        let id = entity.id().to_string();
        self.commit(actor, now, DomainEvent::Registry(RegistryEvent::Registered { entity }))?;
        Ok(id)
    }

    /// Registers a whole seed, or nothing if any entry is invalid.
    pub fn seed_registry(&mut self, actor: &str, seed: &RegistrySeed, now: Timestamp) -> Result<Vec<String>> {
        let entities = seed.validate_against(&self.state.registry)?;
        let mut ids = Vec::with_capacity(entities.len());
        for entity in entities {
            ids.push(entity.id().to_string());
            self.commit(actor, now, DomainEvent::Registry(RegistryEvent::Registered { entity }))?;
        }
        Ok(ids)
    }

    pub fn update_directive(
        &mut self,
        actor: &str,
        system_id: &SystemId,
        directive: DeletionDirective,
        now: Timestamp,
    ) -> Result<u64> {
        let version = self.state.registry.check_directive_update(system_id, &directive)?;
        let system_id = system_id.clone();
        self.commit(actor, now, DomainEvent::Registry(RegistryEvent::DirectiveUpdated { system_id, directive, version }))?;
        Ok(version)
    }

    pub fn set_active(&mut self, actor: &str, system_id: &SystemId, active: bool, now: Timestamp) -> Result<u64> {
        let version = self.state.registry.check_activation(system_id, active)?;
        let system_id = system_id.clone();
        self.commit(actor, now, DomainEvent::Registry(RegistryEvent::ActivationChanged { system_id, active, version }))?;
        Ok(version)
    }

    // plugins

    pub fn publish_plugin(&mut self, actor: &str, descriptor: PluginDescriptor, now: Timestamp) -> Result<String> {
        self.state.plugins.check_publish(&descriptor)?;
        let version = descriptor.version.to_string();
        self.commit(actor, now, DomainEvent::Plugins(PluginEvent::Published { descriptor }))?;
        Ok(version)
    }

    pub fn resolve_plugin(&self, name: &str, req: &VersionConstraint) -> Result<&PluginDescriptor> {
        self.state.plugins.resolve(name, req)
    }

    // policy

    pub fn evaluate_retention(
        &self,
        system_id: &SystemId,
        purpose: Option<&PurposeId>,
        data_timestamp: Timestamp,
        now: Timestamp,
    ) -> Result<RetentionDecision> {
        evaluate_retention(&self.state.registry, system_id, purpose, data_timestamp, now)
    }

    pub fn record_exemption(&mut self, actor: &str, id: &RequestId, claim: ExemptionClaim, now: Timestamp) -> Result<()> {
        let e = self.state.workflow.plan_exemption(id, claim)?;
        self.commit(actor, now, DomainEvent::Workflow(e))?;
        Ok(())
    }

    // workflow

    pub fn submit_request(&mut self, scope: RequestScope, origin: Origin, now: Timestamp) -> Result<ErasureRequest> {
        if let Some(p) = &scope.purpose_filter {
            if self.state.registry.purpose(p).is_none() {
                return Err(Error::UnknownPurpose(p.to_string()));
            }
        }
        let e = self.state.workflow.plan_submit(scope, origin.clone(), now, self.settings.sla_days)?;
        let id = match &e {
            WorkflowEvent::Submitted { request } => request.id.clone(),
            _ => unreachable!("plan_submit yields Submitted"),
        };
        self.commit(origin.identity(), now, DomainEvent::Workflow(e))?;
        self.state.workflow.request(&id).cloned()
    }

    pub fn review(
        &mut self,
        id: &RequestId,
        reviewer: &str,
        decision: ReviewDecision,
        comment: &str,
        now: Timestamp,
    ) -> Result<ErasureRequest> {
        let events = self
            .state
            .workflow
            .plan_review(id, reviewer, decision, comment, now, self.settings.approval_quorum)?;
        self.commit_all(reviewer, now, events.into_iter().map(DomainEvent::Workflow).collect())?;
        self.state.workflow.request(id).cloned()
    }

    pub fn open_subtasks(&mut self, actor: &str, id: &RequestId, systems: &[SystemId], now: Timestamp) -> Result<Vec<SubTask>> {
        let events = self.state.workflow.plan_open_subtasks(id, systems, now)?;
        self.commit_all(actor, now, events.into_iter().map(DomainEvent::Workflow).collect())?;
        let req = self.state.workflow.request(id)?;
        Ok(self.state.workflow.subtasks_of(req).into_iter().cloned().collect())
    }

    pub fn record_subtask_progress(
        &mut self,
        actor: &str,
        id: &SubTaskId,
        status: ProgressStatus,
        now: Timestamp,
    ) -> Result<SubTask> {
        let e = self.state.workflow.plan_progress(id, status, now)?;
        self.commit(actor, now, DomainEvent::Workflow(e))?;
        self.state.workflow.subtask(id).cloned()
    }

    /// Attaches evidence and, with auto-close, closes the parent when this
    /// was its last open sub-task.
    pub fn complete_subtask(&mut self, actor: &str, id: &SubTaskId, evidence: Evidence, now: Timestamp) -> Result<SubTask> {
        let e = self.state.workflow.plan_complete(id, evidence, now)?;
        self.commit(actor, now, DomainEvent::Workflow(e))?;
        self.after_subtask_closed(actor, id, now)
    }

    /// Closes a never-dispatched sub-task, e.g. one blocked by retention.
    pub fn close_undispatched(
        &mut self,
        actor: &str,
        id: &SubTaskId,
        evidence: Evidence,
        retention: Option<RetentionDecision>,
        now: Timestamp,
    ) -> Result<SubTask> {
        let e = self.state.workflow.plan_close_undispatched(id, evidence, retention, now)?;
        self.commit(actor, now, DomainEvent::Workflow(e))?;
        self.after_subtask_closed(actor, id, now)
    }

    fn after_subtask_closed(&mut self, actor: &str, id: &SubTaskId, now: Timestamp) -> Result<SubTask> {
        let st = self.state.workflow.subtask(id)?.clone();
        if self.settings.auto_close {
            self.try_close_request(actor, &st.request_id, now)?;
        }
        Ok(st)
    }

    pub fn try_close_request(&mut self, actor: &str, id: &RequestId, now: Timestamp) -> Result<Option<RequestState>> {
        match self.state.workflow.plan_close(id, now)? {
            Some(e) => {
                let state = match &e {
                    WorkflowEvent::RequestClosed { state, .. } => *state,
                    _ => unreachable!("plan_close yields RequestClosed"),
                };
                self.commit(actor, now, DomainEvent::Workflow(e))?;
                Ok(Some(state))
            }
            None => Ok(None),
        }
    }

    pub fn retry_subtask(&mut self, operator: &str, id: &SubTaskId, now: Timestamp) -> Result<SubTask> {
        let e = self.state.workflow.plan_retry(id, operator, now)?;
        let retry_id = match &e {
            WorkflowEvent::SubtaskRetried { retry, .. } => retry.id.clone(),
            _ => unreachable!("plan_retry yields SubtaskRetried"),
        };
        self.commit(operator, now, DomainEvent::Workflow(e))?;
        self.state.workflow.subtask(&retry_id).cloned()
    }

    pub fn flag_overdue(&mut self, actor: &str, id: &RequestId, now: Timestamp) -> Result<bool> {
        match self.state.workflow.plan_overdue(id, now)? {
            Some(e) => {
                self.commit(actor, now, DomainEvent::Workflow(e))?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    // management

    pub fn enqueue_job(&mut self, actor: &str, job: DeletionJob, now: Timestamp) -> Result<JobId> {
        let e = self.state.management.plan_enqueue(job)?;
        let id = e.job_id().clone();
        self.commit(actor, now, DomainEvent::Management(e))?;
        Ok(id)
    }

    /// Claims the oldest queued job for `system`. The job picks up the
    /// system's directive as registered now, so directive updates apply to
    /// every job claimed after them.
    pub fn claim_next(&mut self, runner: &RunnerId, system: &SystemId, token: &str, now: Timestamp) -> Result<Option<DeletionJob>> {
        self.vault.authorize(system, token)?;
        let directive = self.state.registry.deletion_directive(system).ok().cloned();
        let Some(e) = self
            .state
            .management
            .plan_claim(runner, system, now, self.settings.lease_secs, directive.as_ref())
        else {
            return Ok(None);
        };
        let id = e.job_id().clone();
        self.commit(runner.as_str(), now, DomainEvent::Management(e))?;
        self.state.management.job(&id).cloned().map(Some)
    }

    pub fn report_progress(&mut self, job_id: &JobId, runner: &RunnerId, step: u32, now: Timestamp) -> Result<DeletionJob> {
        let e = self
            .state
            .management
            .plan_progress(job_id, runner, step, now, self.settings.lease_secs)?;
        self.commit(runner.as_str(), now, DomainEvent::Management(e))?;
        self.state.management.job(job_id).cloned()
    }

    pub fn renew_claim(&mut self, job_id: &JobId, runner: &RunnerId, now: Timestamp) -> Result<DeletionJob> {
        let e = self.state.management.plan_renew(job_id, runner, now, self.settings.lease_secs)?;
        self.commit(runner.as_str(), now, DomainEvent::Management(e))?;
        self.state.management.job(job_id).cloned()
    }

    pub fn report_completion(&mut self, job_id: &JobId, runner: &RunnerId, evidence: Evidence, now: Timestamp) -> Result<DeletionJob> {
        let e = self.state.management.plan_completion(job_id, runner, evidence, now)?;
        self.commit(runner.as_str(), now, DomainEvent::Management(e))?;
        self.state.management.job(job_id).cloned()
    }

    /// Requeues or fails every job whose lease has run out.
    pub fn expire_claims(&mut self, now: Timestamp) -> Result<Vec<JobId>> {
        let events = self.state.management.plan_expiry(now, self.settings.max_requeues);
        let ids = events.iter().map(|e| e.job_id().clone()).collect();
        self.commit_all("management", now, events.into_iter().map(DomainEvent::Management).collect())?;
        Ok(ids)
    }
}
