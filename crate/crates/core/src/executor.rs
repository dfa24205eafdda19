//! The execution engine: periodic scan, reconcile and overdue cycles.
//!
//! Every cycle is resumable. If one stops part way (a crash between two
//! commits), running it again at the same instant finishes the work without
//! dispatching anything twice: job ids are derived from (request, sub-task)
//! and a duplicate enqueue only marks the sub-task dispatched.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{JobId, RequestId, SubTaskId, SystemId};
use crate::management::{DeletionJob, JobCensus, JobState};
use crate::service::Service;
use crate::time::Timestamp;
use crate::workflow::{Evidence, ProgressStatus, RequestScope, RequestState, SubTaskState};

pub const EXECUTOR: &str = "executor";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutorConfig {
    pub scan_interval_secs: u64,
    pub reconcile_interval_secs: u64,
    /// Upper bound on requests expanded per scan cycle.
    pub max_parallel_dispatch: u32,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        ExecutorConfig { scan_interval_secs: 60, reconcile_interval_secs: 30, max_parallel_dispatch: 16 }
    }
}

impl ExecutorConfig {
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.scan_interval_secs == 0 {
            return Err(("scan_interval_secs", "must be > 0".into()));
        }
        if self.reconcile_interval_secs == 0 {
            return Err(("reconcile_interval_secs", "must be > 0".into()));
        }
        if self.max_parallel_dispatch == 0 {
            return Err(("max_parallel_dispatch", "must be >= 1".into()));
        }
        Ok(())
    }
}

/// Source of the representative data timestamp used for retention checks.
pub trait TargetMetadata {
    /// Oldest record on `system` matching `scope`, if any.
    fn oldest_record(&self, system: &SystemId, scope: &RequestScope) -> Option<Timestamp>;
}

/// No metadata available: retention is not evaluated.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoMetadata;

impl TargetMetadata for NoMetadata {
    fn oldest_record(&self, _: &SystemId, _: &RequestScope) -> Option<Timestamp> {
        None
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dispatch {
    pub request_id: RequestId,
    pub job_ids: Vec<JobId>,
    /// Sub-tasks closed without a job (retention deny or inactive system).
    pub closed_without_job: Vec<SubTaskId>,
}

fn isolate<T>(what: &str, id: &RequestId, r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e) if e.is_fatal() => Err(e),
        Err(e) => {
            tracing::warn!(request = %id, error = %e, "{what} failed");
            Ok(None)
        }
    }
}

/// Expands Approved requests and dispatches every pending sub-task.
pub fn scan_cycle(svc: &mut Service, meta: &dyn TargetMetadata, cfg: &ExecutorConfig, now: Timestamp) -> Result<Vec<Dispatch>> {
    let approved: Vec<RequestId> = svc
        .workflow()
        .requests()
        .filter(|r| r.state == RequestState::Approved && !r.expanded)
        .take(cfg.max_parallel_dispatch as usize)
        .map(|r| r.id.clone())
        .collect();
    for id in &approved {
        isolate("expansion", id, expand(svc, id, now))?;
    }
    let wf = svc.workflow();
    let pending: Vec<RequestId> = wf
        .requests()
        .filter(|r| r.state == RequestState::Executing)
        .filter(|r| wf.active_subtasks_of(r).iter().any(|s| s.state == SubTaskState::Pending))
        .map(|r| r.id.clone())
        .collect();
    let mut out = Vec::new();
    for id in &pending {
        if let Some(d) = isolate("dispatch", id, dispatch_request(svc, meta, id, now))? {
            out.push(d);
        }
    }
    Ok(out)
}

fn expand(svc: &mut Service, id: &RequestId, now: Timestamp) -> Result<()> {
    let scope = svc.workflow().request(id)?.scope.clone();
    let systems: Vec<SystemId> = svc
        .registry()
        .systems_for_scope(&scope)?
        .into_iter()
        .map(|s| s.id.clone())
        .collect();
    svc.open_subtasks(EXECUTOR, id, &systems, now)?;
    Ok(())
}

fn dispatch_request(svc: &mut Service, meta: &dyn TargetMetadata, id: &RequestId, now: Timestamp) -> Result<Dispatch> {
    let req = svc.workflow().request(id)?.clone();
    let pending: Vec<(SubTaskId, SystemId)> = svc
        .workflow()
        .active_subtasks_of(&req)
        .into_iter()
        .filter(|s| s.state == SubTaskState::Pending)
        .map(|s| (s.id.clone(), s.system_id.clone()))
        .collect();
    let mut out = Dispatch { request_id: id.clone(), ..Default::default() };
    for (st, system_id) in pending {
        let system = match svc.registry().system(&system_id) {
            Some(v) if v.record.active => v.record.clone(),
            _ => {
                let ev = Evidence::error(format!("system {system_id} is not active; nothing dispatched"), ("-", "-"), now);
                svc.close_undispatched(EXECUTOR, &st, ev, None, now)?;
                out.closed_without_job.push(st);
                continue;
            }
        };
        let directive = system.directive;
        if let Some(ts) = meta.oldest_record(&system_id, &req.scope) {
            let decision = svc.evaluate_retention(&system_id, req.scope.purpose_filter.as_ref(), ts.min(now), now)?;
            if decision.is_deny() {
                let policy = decision.policy_id.as_ref().map(|p| p.to_string()).unwrap_or_default();
                let ev = Evidence::error(
                    format!("{} [policy {policy}]", decision.rationale),
                    (&directive.plugin_name, "-"),
                    now,
                );
                svc.close_undispatched(EXECUTOR, &st, ev, Some(decision), now)?;
                out.closed_without_job.push(st);
                continue;
            }
        }
        let job = DeletionJob {
            id: JobId::derive(id, &st),
            request_id: id.clone(),
            subtask_id: st.clone(),
            system_id: system_id.clone(),
            subject: req.scope.subject.clone(),
            purpose_filter: req.scope.purpose_filter.clone(),
            plugin_name: directive.plugin_name,
            plugin_version_req: directive.plugin_version_req,
            plugin_config: directive.plugin_config,
            credential_ref: svc.vault().credential_ref(&system_id),
            state: JobState::Queued,
            enqueued_at: now,
            requeue_count: 0,
            enqueue_seq: 0,
        };
        let job_id = match svc.enqueue_job(EXECUTOR, job, now) {
            Ok(j) | Err(Error::DuplicateJob(j)) => j,
            Err(e) => return Err(e),
        };
        svc.record_subtask_progress(EXECUTOR, &st, ProgressStatus::Dispatched { job_id: job_id.clone() }, now)?;
        out.job_ids.push(job_id);
    }
    Ok(out)
}

/// Copies job progress and outcomes onto sub-tasks and closes finished
/// requests. Returns the sub-tasks closed by this cycle.
pub fn reconcile_cycle(svc: &mut Service, now: Timestamp) -> Result<Vec<SubTaskId>> {
    let watched: Vec<(SubTaskId, RequestId, JobId, Option<u32>)> = svc
        .workflow()
        .subtasks()
        .filter(|s| s.is_active() && matches!(s.state, SubTaskState::Dispatched | SubTaskState::InProgress))
        .filter_map(|s| Some((s.id.clone(), s.request_id.clone(), s.job_id.clone()?, s.last_step)))
        .collect();
    let mut closed = Vec::new();
    for (st, req, job_id, last_step) in watched {
        let job = match svc.management().job(&job_id) {
            Ok(j) => j.state.clone(),
            Err(e) => {
                tracing::warn!(subtask = %st, error = %e, "job not found");
                continue;
            }
        };
        let r = match job {
            JobState::InProgress { step, .. } if last_step.is_none_or(|l| l < step) => svc
                .record_subtask_progress(EXECUTOR, &st, ProgressStatus::InProgress { step: Some(step) }, now)
                .map(|_| ()),
            JobState::Done { evidence } | JobState::Failed { evidence } => {
                svc.complete_subtask(EXECUTOR, &st, evidence, now).map(|_| closed.push(st.clone()))
            }
            _ => Ok(()),
        };
        isolate("reconcile", &req, r)?;
    }
    if svc.settings().auto_close {
        let wf = svc.workflow();
        let finished: Vec<RequestId> = wf
            .requests()
            .filter(|r| r.state == RequestState::Executing)
            .filter(|r| wf.active_subtasks_of(r).iter().all(|s| s.state.is_terminal()))
            .map(|r| r.id.clone())
            .collect();
        for id in finished {
            let r = svc.try_close_request(EXECUTOR, &id, now);
            isolate("close", &id, r)?;
        }
    }
    Ok(closed)
}

/// Flags every open request past its deadline, once.
pub fn overdue_scan(svc: &mut Service, now: Timestamp) -> Result<Vec<RequestId>> {
    let candidates: Vec<RequestId> = svc
        .workflow()
        .requests()
        .filter(|r| !r.state.is_terminal() && !r.overdue && now > r.deadline)
        .map(|r| r.id.clone())
        .collect();
    let mut flagged = Vec::new();
    for id in candidates {
        if svc.flag_overdue(EXECUTOR, &id, now)? {
            flagged.push(id);
        }
    }
    Ok(flagged)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metrics {
    pub requests_total: u64,
    pub requests_by_state: BTreeMap<String, u64>,
    pub requests_dispatched: u64,
    pub jobs_reconciled: u64,
    pub overdue_count: u64,
    pub jobs: JobCensus,
    pub audit_entries: u64,
}

/// Counters derived from current state.
pub fn metrics(svc: &Service) -> Metrics {
    let wf = svc.workflow();
    let mut m = Metrics { jobs: svc.management().census(), audit_entries: svc.store().len(), ..Default::default() };
    for r in wf.requests() {
        m.requests_total += 1;
        *m.requests_by_state.entry(format!("{:?}", r.state)).or_default() += 1;
        m.requests_dispatched += r.expanded as u64;
        m.overdue_count += r.overdue as u64;
    }
    m.jobs_reconciled = wf.subtasks().filter(|s| s.state.is_terminal() && s.job_id.is_some()).count() as u64;
    m
}
