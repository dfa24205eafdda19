//! Deterministic scenario simulation under a virtual clock.
//!
//! A scenario is a registry seed, a fleet spec, plugin releases and a script
//! of timed operator actions. The driver advances virtual time in fixed
//! ticks; within a tick the order is: script actions, scan cycle, runner
//! ticks (by system id), ETL ticks, lease expiry, reconcile cycle, overdue
//! scan.
//!
//! Crash points simulate the service dying just before a given log entry is
//! written. The driver rebuilds the service from the log written so far and
//! repeats the interrupted operation; runners and target systems live on,
//! as separate processes would.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use semver::Version;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::executor::{overdue_scan, reconcile_cycle, scan_cycle, ExecutorConfig};
use crate::ids::{JobId, PurposeId, RequestId, RunnerId, SubTaskId, SystemId};
use crate::management::{JobCensus, JobState, RunnerCredential, Vault};
use crate::notify::{Inbox, NotificationKind, Notifier, Subscription};
use crate::plugins::{BehaviorSpec, BuiltinBehavior, PluginDescriptor};
use crate::policy::{ExemptionCategory, ExemptionClaim};
use crate::registry::{DeletionDirective, RegistrySeed};
use crate::service::{Service, Settings};
use crate::targets::{runner_tick, ActionKind, Fleet, FleetSpec, RunnerState, SubjectIdentity};
use crate::time::Timestamp;
use crate::workflow::{closure_state, EvidenceKind, Origin, RequestScope, RequestState, ReviewDecision, SubTaskState, SubjectRef};

pub const SCENARIO_ACTOR: &str = "scenario";

fn default_start() -> i64 {
    1_700_000_000
}

fn default_tick() -> u64 {
    10
}

fn default_max_duration() -> u64 {
    7 * 86_400
}

fn default_poll() -> u64 {
    10
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluginSpec {
    pub name: String,
    pub version: Version,
    pub behavior: BuiltinBehavior,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

impl PluginSpec {
    pub fn descriptor(&self, at: Timestamp) -> PluginDescriptor {
        PluginDescriptor::new(
            self.name.clone(),
            self.version.clone(),
            BehaviorSpec { behavior: self.behavior, params: self.params.clone() },
            at,
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Via {
    #[default]
    Api,
    Manual,
}

fn default_submitter() -> String {
    "intake-api".into()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ScriptAction {
    Submit {
        label: String,
        subject: SubjectRef,
        #[serde(default)]
        purpose_filter: Option<PurposeId>,
        #[serde(default)]
        via: Via,
        #[serde(default = "default_submitter")]
        by: String,
    },
    Review {
        label: String,
        reviewer: String,
        decision: ReviewDecision,
        #[serde(default)]
        comment: String,
    },
    Exemption {
        label: String,
        category: ExemptionCategory,
        justification: String,
        claimed_by: String,
    },
    PublishPlugin {
        plugin: PluginSpec,
    },
    UpdateDirective {
        system_id: SystemId,
        directive: DeletionDirective,
    },
    /// Clears injected faults on one system, or on all when `system_id` is absent.
    ClearFaults {
        #[serde(default)]
        system_id: Option<SystemId>,
    },
    /// Retries every failed, not yet retried sub-task of a request.
    RetryFailed {
        label: String,
        operator: String,
    },
    SetActive {
        system_id: SystemId,
        active: bool,
    },
    Close {
        label: String,
        operator: String,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptStep {
    /// Seconds from the scenario start.
    pub at: u64,
    #[serde(flatten)]
    pub action: ScriptAction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default = "default_start")]
    pub start_time: i64,
    #[serde(default = "default_tick")]
    pub tick_secs: u64,
    #[serde(default = "default_max_duration")]
    pub max_duration_secs: u64,
    #[serde(default = "default_poll")]
    pub poll_interval_secs: u64,
    #[serde(default)]
    pub settings: Settings,
    #[serde(default)]
    pub executor: ExecutorConfig,
    pub registry: RegistrySeed,
    #[serde(default)]
    pub plugins: Vec<PluginSpec>,
    pub fleet: FleetSpec,
    #[serde(default)]
    pub script: Vec<ScriptStep>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let inner = e.inner();
            Error::ScenarioInvalid(format!("{} (line {}, column {}): {inner}", e.path(), inner.line(), inner.column()))
        })
    }

    /// Scenarios shipped with the crate, by name.
    pub fn bundled(name: &str) -> Option<Scenario> {
        let text = match name {
            "smoke" => include_str!("../scenarios/smoke.json"),
            "faulty" => include_str!("../scenarios/faulty.json"),
            "plugin-update" => include_str!("../scenarios/plugin-update.json"),
            _ => return None,
        };
        Some(Scenario::from_json(text).expect("bundled scenarios parse"))
    }

    pub fn bundled_names() -> &'static [&'static str] {
        &["smoke", "faulty", "plugin-update"]
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ScenarioInvalid(m));
        if self.tick_secs == 0 {
            return bad("tick_secs must be > 0".into());
        }
        if self.poll_interval_secs == 0 {
            return bad("poll_interval_secs must be > 0".into());
        }
        if let Err((field, why)) = self.settings.validate() {
            return bad(format!("settings.{field} {why}"));
        }
        if let Err((field, why)) = self.executor.validate() {
            return bad(format!("executor.{field} {why}"));
        }
        if self.tick_secs >= self.settings.lease_secs {
            return bad("tick_secs must be shorter than the claim lease".into());
        }
        if self.script.windows(2).any(|w| w[0].at > w[1].at) {
            return bad("script steps must be ordered by time".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskOutcome {
    pub subtask_id: SubTaskId,
    pub system_id: SystemId,
    pub geo_region: String,
    pub state: SubTaskState,
    pub active: bool,
    pub evidence_kind: Option<EvidenceKind>,
    pub records_affected: Option<u64>,
    pub plugin_version: Option<String>,
    pub job_id: Option<JobId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestOutcome {
    pub label: Option<String>,
    pub request_id: RequestId,
    pub subject: String,
    pub state: RequestState,
    pub overdue: bool,
    pub subtasks: Vec<SubtaskOutcome>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceSummary {
    pub success: u64,
    pub no_data_found: u64,
    pub error: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub entries: u64,
    pub transitions: BTreeMap<String, u64>,
    pub transition_total: u64,
    pub chain_intact: bool,
    pub tail_hash: String,
}

/// Location of an action-log line: system and zero-based line index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionPosition {
    pub system_id: SystemId,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvariantResult {
    pub name: String,
    pub holds: bool,
    pub detail: String,
    pub positions: Vec<ActionPosition>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub seed: u64,
    pub started_at: Timestamp,
    pub finished_at: Timestamp,
    pub ticks: u64,
    pub crashes: u32,
    pub quiescent: bool,
    pub requests: Vec<RequestOutcome>,
    pub evidence: EvidenceSummary,
    pub jobs: JobCensus,
    pub audit: AuditSummary,
    pub notifications: u64,
    pub actions: BTreeMap<SystemId, BTreeMap<ActionKind, u64>>,
    pub script_errors: Vec<String>,
    pub invariants: Vec<InvariantResult>,
}

impl ScenarioReport {
    pub fn violations(&self) -> Vec<&InvariantResult> {
        self.invariants.iter().filter(|i| !i.holds).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

pub struct Simulation {
    scenario: Scenario,
    seed: u64,
    svc: Service,
    fleet: Fleet,
    runners: Vec<RunnerState>,
    inbox: Inbox,
    labels: BTreeMap<String, RequestId>,
    epoch: Timestamp,
    now: Timestamp,
    ticks: u64,
    next_scan: Timestamp,
    next_reconcile: Timestamp,
    cursor: usize,
    crash_points: VecDeque<u64>,
    crashes: u32,
    script_errors: Vec<String>,
}

impl std::fmt::Debug for Simulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulation")
            .field("scenario", &self.scenario.name)
            .field("seed", &self.seed)
            .field("now", &self.now)
            .finish()
    }
}

fn runner_token(system: &SystemId) -> String {
    format!("token-{system}")
}

impl Simulation {
    pub fn new(scenario: Scenario, seed: u64) -> Result<Self> {
        scenario.validate()?;
        let epoch = Timestamp(scenario.start_time);
        let mut svc = Service::in_memory(scenario.settings.clone());
        svc.seed_registry(SCENARIO_ACTOR, &scenario.registry, epoch)
            .map_err(|e| Error::ScenarioInvalid(format!("registry: {e}")))?;
        for p in &scenario.plugins {
            svc.publish_plugin(SCENARIO_ACTOR, p.descriptor(epoch), epoch)
                .map_err(|e| Error::ScenarioInvalid(format!("plugins: {e}")))?;
        }
        let fleet = Fleet::seed(&scenario.fleet, svc.registry(), seed, epoch)
            .map_err(|e| Error::ScenarioInvalid(format!("fleet: {e}")))?;
        let runners = fleet
            .systems
            .keys()
            .map(|id| RunnerState::new(RunnerId::new(format!("runner-{id}")), id.clone(), runner_token(id), scenario.poll_interval_secs))
            .collect();
        let mut sim = Simulation {
            svc,
            fleet,
            runners,
            inbox: Inbox::new(),
            labels: BTreeMap::new(),
            epoch,
            now: epoch,
            ticks: 0,
            next_scan: epoch,
            next_reconcile: epoch,
            cursor: 0,
            crash_points: VecDeque::new(),
            crashes: 0,
            script_errors: Vec::new(),
            scenario,
            seed,
        };
        sim.attach();
        Ok(sim)
    }

    /// Log lengths at which the service dies before writing the next entry.
    pub fn with_crash_points(mut self, mut points: Vec<u64>) -> Self {
        points.sort_unstable();
        points.dedup();
        self.crash_points = points.into();
        self
    }

    fn attach(&mut self) {
        let mut vault = Vault::new();
        for id in self.fleet.systems.keys() {
            vault.insert(id.clone(), RunnerCredential { runner_token: runner_token(id), credential_ref: format!("cred-{id}") });
        }
        self.svc.set_vault(vault);
        let mut notifier = Notifier::new();
        notifier.add_sink("inbox", Arc::new(self.inbox.clone()));
        let all: BTreeSet<NotificationKind> = [
            NotificationKind::Created,
            NotificationKind::Approved,
            NotificationKind::Rejected,
            NotificationKind::SubTaskClosed,
            NotificationKind::RequestClosed,
            NotificationKind::Overdue,
        ]
        .into();
        notifier
            .subscribe(Subscription { subscriber: "operations".into(), events: all, channel: "inbox".into() })
            .expect("inbox sink registered");
        self.svc.set_notifier(notifier);
    }

    fn recover(&mut self) -> Result<()> {
        let bytes = self.svc.store().log_bytes();
        let before = self.svc.state().clone();
        self.svc = Service::from_log_bytes(&bytes, self.scenario.settings.clone())?;
        debug_assert!(*self.svc.state() == before, "replayed state differs from live state");
        self.attach();
        self.crashes += 1;
        Ok(())
    }

    fn arm(&mut self) {
        while let Some(&p) = self.crash_points.front() {
            if p < self.svc.store().len() {
                self.crash_points.pop_front();
                continue;
            }
            self.svc.store_mut().arm_crash(p);
            return;
        }
    }

    /// Runs `op`, surviving simulated crashes by recovering and repeating it.
    fn guarded<T>(&mut self, mut op: impl FnMut(&mut Simulation) -> Result<T>) -> Result<T> {
        loop {
            self.arm();
            match op(self) {
                Err(Error::Crashed(at)) => {
                    if self.crash_points.front() == Some(&at) {
                        self.crash_points.pop_front();
                    }
                    self.recover()?;
                }
                other => return other,
            }
        }
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    pub fn epoch(&self) -> Timestamp {
        self.epoch
    }

    pub fn service(&self) -> &Service {
        &self.svc
    }

    pub fn service_mut(&mut self) -> &mut Service {
        &mut self.svc
    }

    pub fn fleet(&self) -> &Fleet {
        &self.fleet
    }

    pub fn fleet_mut(&mut self) -> &mut Fleet {
        &mut self.fleet
    }

    pub fn inbox(&self) -> &Inbox {
        &self.inbox
    }

    pub fn request(&self, label: &str) -> Option<&RequestId> {
        self.labels.get(label)
    }

    pub fn crashes(&self) -> u32 {
        self.crashes
    }

    fn label(&self, label: &str) -> Result<RequestId> {
        self.labels
            .get(label)
            .cloned()
            .ok_or_else(|| Error::UnknownReference { kind: "label", id: label.to_string() })
    }

    /// Performs one operator action at the current virtual time.
    pub fn perform(&mut self, action: &ScriptAction) -> Result<()> {
        let now = self.now;
        match action {
            ScriptAction::Submit { label, subject, purpose_filter, via, by } => {
                if self.labels.contains_key(label) {
                    return Err(Error::DuplicateId { kind: "label", id: label.clone() });
                }
                let scope = RequestScope { subject: subject.clone(), purpose_filter: purpose_filter.clone() };
                let origin = match via {
                    Via::Api => Origin::Api(by.clone()),
                    Via::Manual => Origin::Manual(by.clone()),
                };
                let req = self.guarded(|s| s.svc.submit_request(scope.clone(), origin.clone(), now))?;
                self.labels.insert(label.clone(), req.id);
            }
            ScriptAction::Review { label, reviewer, decision, comment } => {
                let id = self.label(label)?;
                self.guarded(|s| s.svc.review(&id, reviewer, *decision, comment, now))?;
            }
            ScriptAction::Exemption { label, category, justification, claimed_by } => {
                let id = self.label(label)?;
                let claim = ExemptionClaim {
                    category: *category,
                    justification: justification.clone(),
                    claimed_by: claimed_by.clone(),
                    timestamp: now,
                };
                self.guarded(|s| s.svc.record_exemption(claimed_by, &id, claim.clone(), now))?;
            }
            ScriptAction::PublishPlugin { plugin } => {
                let d = plugin.descriptor(now);
                self.guarded(|s| s.svc.publish_plugin(SCENARIO_ACTOR, d.clone(), now))?;
            }
            ScriptAction::UpdateDirective { system_id, directive } => {
                self.guarded(|s| s.svc.update_directive(SCENARIO_ACTOR, system_id, directive.clone(), now))?;
            }
            ScriptAction::ClearFaults { system_id } => {
                for (id, sys) in self.fleet.systems.iter_mut() {
                    if system_id.as_ref().is_none_or(|s| s == id) {
                        sys.clear_faults();
                    }
                }
            }
            ScriptAction::RetryFailed { label, operator } => {
                let id = self.label(label)?;
                self.guarded(|s| {
                    let req = s.svc.workflow().request(&id)?.clone();
                    let failed: Vec<SubTaskId> = s
                        .svc
                        .workflow()
                        .active_subtasks_of(&req)
                        .into_iter()
                        .filter(|t| t.state == SubTaskState::Failed)
                        .map(|t| t.id.clone())
                        .collect();
                    for st in failed {
                        s.svc.retry_subtask(operator, &st, now)?;
                    }
                    Ok(())
                })?;
            }
            ScriptAction::SetActive { system_id, active } => {
                self.guarded(|s| s.svc.set_active(SCENARIO_ACTOR, system_id, *active, now))?;
            }
            ScriptAction::Close { label, operator } => {
                let id = self.label(label)?;
                self.guarded(|s| s.svc.try_close_request(operator, &id, now))?;
            }
        }
        Ok(())
    }

    /// Subjects with a deletion job in flight on `system`.
    fn in_flight(&self, system: &SystemId) -> Vec<SubjectRef> {
        self.svc
            .management()
            .jobs()
            .filter(|j| j.system_id == *system && !j.state.is_terminal())
            .map(|j| j.subject.clone())
            .collect()
    }

    /// Advances one tick.
    pub fn step(&mut self) -> Result<()> {
        let t = self.now;
        while let Some(step) = self.scenario.script.get(self.cursor) {
            if self.epoch.plus_secs(step.at as i64) > t {
                break;
            }
            let action = step.action.clone();
            self.cursor += 1;
            if let Err(e) = self.perform(&action) {
                if e.is_fatal() {
                    return Err(e);
                }
                self.script_errors.push(format!("t+{}: {action:?}: {e}", t.secs() - self.epoch.secs()));
            }
        }
        if t >= self.next_scan {
            let cfg = self.scenario.executor.clone();
            self.guarded(|s| scan_cycle(&mut s.svc, &s.fleet, &cfg, t))?;
            self.next_scan = t.plus_secs(cfg.scan_interval_secs as i64);
        }
        for i in 0..self.runners.len() {
            self.guarded(|s| {
                let r = &mut s.runners[i];
                let sys = s.fleet.systems.get_mut(&r.system_id).expect("runner system in fleet");
                runner_tick(r, &mut s.svc, sys, t)
            })?;
        }
        let ids: Vec<SystemId> = self.fleet.systems.keys().cloned().collect();
        for id in ids {
            let blocked = self.in_flight(&id);
            if let Some(sys) = self.fleet.systems.get_mut(&id) {
                sys.etl_tick(t, &blocked);
            }
        }
        self.guarded(|s| s.svc.expire_claims(t))?;
        if t >= self.next_reconcile {
            self.guarded(|s| reconcile_cycle(&mut s.svc, t))?;
            self.next_reconcile = t.plus_secs(self.scenario.executor.reconcile_interval_secs as i64);
        }
        self.guarded(|s| overdue_scan(&mut s.svc, t))?;
        self.ticks += 1;
        self.now = t.plus_secs(self.scenario.tick_secs as i64);
        Ok(())
    }

    /// True once the script is done and nothing is left to run.
    pub fn is_quiescent(&self) -> bool {
        let census = self.svc.management().census();
        self.cursor >= self.scenario.script.len()
            && self.svc.workflow().requests().all(|r| r.state.is_terminal())
            && self.runners.iter().all(|r| !r.is_busy())
            && census.queued + census.claimed + census.in_progress == 0
    }

    fn deadline(&self) -> Timestamp {
        self.epoch.plus_secs(self.scenario.max_duration_secs as i64)
    }

    /// Runs until quiescent or out of time.
    pub fn run(&mut self) -> Result<()> {
        while self.now <= self.deadline() {
            self.step()?;
            if self.is_quiescent() {
                break;
            }
        }
        Ok(())
    }

    /// Runs every tick strictly before `t`.
    pub fn run_until(&mut self, t: Timestamp) -> Result<()> {
        while self.now < t {
            self.step()?;
        }
        Ok(())
    }

    /// Per-request outcomes, without timestamps.
    pub fn outcomes(&self) -> Vec<RequestOutcome> {
        let wf = self.svc.workflow();
        let by_id: BTreeMap<&RequestId, &String> = self.labels.iter().map(|(l, id)| (id, l)).collect();
        wf.requests()
            .map(|r| RequestOutcome {
                label: by_id.get(&r.id).map(|l| l.to_string()),
                request_id: r.id.clone(),
                subject: r.scope.subject.to_string(),
                state: r.state,
                overdue: r.overdue,
                subtasks: wf
                    .subtasks_of(r)
                    .into_iter()
                    .map(|s| SubtaskOutcome {
                        subtask_id: s.id.clone(),
                        system_id: s.system_id.clone(),
                        geo_region: self
                            .svc
                            .registry()
                            .system(&s.system_id)
                            .map(|v| v.record.geo_region.clone())
                            .unwrap_or_default(),
                        state: s.state,
                        active: s.is_active(),
                        evidence_kind: s.evidence.as_ref().map(|e| e.kind),
                        records_affected: s.evidence.as_ref().and_then(|e| e.records_affected),
                        plugin_version: s.evidence.as_ref().map(|e| e.plugin_version.clone()),
                        job_id: s.job_id.clone(),
                    })
                    .collect(),
            })
            .collect()
    }

    pub fn report(&self) -> ScenarioReport {
        let requests = self.outcomes();
        let mut evidence = EvidenceSummary::default();
        for s in self.svc.workflow().subtasks() {
            match s.evidence.as_ref().map(|e| e.kind) {
                Some(EvidenceKind::Success) => evidence.success += 1,
                Some(EvidenceKind::NoDataFound) => evidence.no_data_found += 1,
                Some(EvidenceKind::Error) => evidence.error += 1,
                None => {}
            }
        }
        let state = self.svc.state();
        let audit = AuditSummary {
            entries: self.svc.store().len(),
            transitions: state.transition_counts().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            transition_total: state.transition_total(),
            chain_intact: self.svc.store().verify_all().intact,
            tail_hash: self.svc.store().tail_hash().to_string(),
        };
        let actions = self
            .fleet
            .systems
            .iter()
            .map(|(id, s)| {
                let mut counts = BTreeMap::new();
                for e in &s.action_log {
                    *counts.entry(e.action).or_insert(0) += 1;
                }
                (id.clone(), counts)
            })
            .collect();
        ScenarioReport {
            scenario: self.scenario.name.clone(),
            seed: self.seed,
            started_at: self.epoch,
            finished_at: self.now,
            ticks: self.ticks,
            crashes: self.crashes,
            quiescent: self.is_quiescent(),
            requests,
            evidence,
            jobs: self.svc.management().census(),
            audit,
            notifications: self.inbox.len() as u64,
            actions,
            script_errors: self.script_errors.clone(),
            invariants: self.check_invariants(),
        }
    }

    pub fn check_invariants(&self) -> Vec<InvariantResult> {
        let mut out = Vec::new();
        let mut push = |name: &str, bad: Vec<String>, positions: Vec<ActionPosition>| {
            let holds = bad.is_empty() && positions.is_empty();
            let detail = if holds {
                "ok".to_string()
            } else if bad.is_empty() {
                format!("{} offending action-log lines", positions.len())
            } else {
                bad.into_iter().take(5).collect::<Vec<_>>().join("; ")
            };
            out.push(InvariantResult { name: name.into(), holds, detail, positions });
        };
        let wf = self.svc.workflow();
        let mgmt = self.svc.management();

        let open: Vec<String> = wf.requests().filter(|r| !r.state.is_terminal()).map(|r| format!("{} is {:?}", r.id, r.state)).collect();
        push("all_requests_terminal", open, vec![]);

        let evidence: Vec<String> = wf
            .subtasks()
            .filter(|s| s.state.is_terminal() != (s.evidence.is_some() && s.closed_at.is_some()))
            .map(|s| format!("{} is {:?} with evidence {:?}", s.id, s.state, s.evidence.as_ref().map(|e| e.kind)))
            .collect();
        push("one_evidence_per_terminal_subtask", evidence, vec![]);

        let closure: Vec<String> = wf
            .requests()
            .filter(|r| r.expanded && r.state.is_terminal())
            .filter_map(|r| {
                let states: Vec<_> = wf.active_subtasks_of(r).iter().map(|s| s.state).collect();
                let expected = closure_state(&states);
                (expected != Some(r.state)).then(|| format!("{} is {:?}, rule gives {expected:?}", r.id, r.state))
            })
            .collect();
        push("closure_rule", closure, vec![]);

        let mut etl = Vec::new();
        let mut load = Vec::new();
        for (id, sys) in &self.fleet.systems {
            for (index, e) in sys.action_log.iter().enumerate() {
                if e.action != ActionKind::DeleteStep {
                    continue;
                }
                if sys.in_etl_window(e.t) {
                    etl.push(ActionPosition { system_id: id.clone(), index });
                }
                if sys.overloaded(e.t) {
                    load.push(ActionPosition { system_id: id.clone(), index });
                }
            }
        }
        push("etl_mutual_exclusion", vec![], etl);
        push("load_deferral", vec![], load);

        let mut loads_in_flight = Vec::new();
        for (id, sys) in &self.fleet.systems {
            let jobs: Vec<_> = mgmt.jobs().filter(|j| j.system_id == *id).collect();
            for (index, e) in sys.action_log.iter().enumerate() {
                if e.action != ActionKind::EtlLoad {
                    continue;
                }
                let subjects: Vec<SubjectIdentity> =
                    serde_json::from_value(e.detail["subjects"].clone()).unwrap_or_default();
                let hit = jobs.iter().any(|j| {
                    let end = j.state.evidence().map_or(Timestamp(i64::MAX), |ev| ev.produced_at);
                    j.enqueued_at <= e.t && e.t < end && subjects.iter().any(|s| s.matches(&j.subject))
                });
                if hit {
                    loads_in_flight.push(ActionPosition { system_id: id.clone(), index });
                }
            }
        }
        push("etl_skips_in_flight_subjects", vec![], loads_in_flight);

        let mut per_subtask: BTreeMap<&SubTaskId, u32> = BTreeMap::new();
        let mut live_pairs: BTreeMap<(&RequestId, &SystemId), u32> = BTreeMap::new();
        for j in mgmt.jobs() {
            *per_subtask.entry(&j.subtask_id).or_default() += 1;
            if !j.state.is_terminal() {
                *live_pairs.entry((&j.request_id, &j.system_id)).or_default() += 1;
            }
        }
        let mut dupes: Vec<String> = per_subtask.iter().filter(|(_, n)| **n > 1).map(|(s, n)| format!("{s} has {n} jobs")).collect();
        dupes.extend(live_pairs.iter().filter(|(_, n)| **n > 1).map(|((r, s), n)| format!("{r}/{s} has {n} live jobs")));
        for s in wf.subtasks() {
            if let Some(j) = &s.job_id {
                match mgmt.job(j) {
                    Ok(job) if job.subtask_id == s.id => {}
                    _ => dupes.push(format!("{} points at foreign job {j}", s.id)),
                }
            }
        }
        push("exactly_once_dispatch", dupes, vec![]);

        let census = mgmt.census();
        push(
            "job_conservation",
            if census.is_conserved() { vec![] } else { vec![format!("{census:?}")] },
            vec![],
        );

        let holders: Vec<String> = mgmt
            .jobs()
            .filter(|j| matches!(j.state, JobState::Done { .. } | JobState::Failed { .. }) && j.state.holder().is_some())
            .map(|j| j.id.to_string())
            .collect();
        push("terminal_jobs_have_no_holder", holders, vec![]);

        let report = self.svc.store().verify_all();
        push(
            "audit_chain_intact",
            report.first_mismatch.map(|m| format!("seq {}: {}", m.seq, m.reason)).into_iter().collect(),
            vec![],
        );
        let (entries, transitions) = (self.svc.store().len(), self.svc.state().transition_total());
        push(
            "audit_count_equals_transitions",
            if entries == transitions { vec![] } else { vec![format!("{entries} audit entries, {transitions} transitions")] },
            vec![],
        );
        let replay = Service::from_log_bytes(&self.svc.store().log_bytes(), self.scenario.settings.clone());
        let replay_bad = match replay {
            Ok(r) if r.state() == self.svc.state() => vec![],
            Ok(_) => vec!["replayed state differs from live state".to_string()],
            Err(e) => vec![e.to_string()],
        };
        push("replay_reproduces_state", replay_bad, vec![]);
        out
    }
}

/// Runs a scenario to completion and returns its report; any violated
/// invariant is an error carrying the report.
pub fn run_scenario(scenario: Scenario, seed: u64) -> std::result::Result<ScenarioReport, (Error, Option<Box<ScenarioReport>>)> {
    let mut sim = Simulation::new(scenario, seed).map_err(|e| (e, None))?;
    sim.run().map_err(|e| (e, None))?;
    let report = sim.report();
    let violated: Vec<String> = report
        .violations()
        .iter()
        .map(|v| {
            let at: Vec<String> = v.positions.iter().take(5).map(|p| format!("{}#{}", p.system_id, p.index)).collect();
            if at.is_empty() {
                format!("{}: {}", v.name, v.detail)
            } else {
                format!("{}: {} at {}", v.name, v.detail, at.join(", "))
            }
        })
        .collect();
    if violated.is_empty() {
        Ok(report)
    } else {
        Err((Error::InvariantViolation(violated.join(" | ")), Some(Box::new(report))))
    }
}
