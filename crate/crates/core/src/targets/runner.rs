//! The per-system plugin runner.
//!
//! Each tick does one bounded unit of work against the management
//! component. A report that fails because the service went down is kept and
//! resent on the next tick, before any new work.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::Result;
use crate::ids::{JobId, RunnerId, SystemId};
use crate::management::DeletionJob;
use crate::plugins::{BuiltinBehavior, PluginDescriptor};
use crate::service::Service;
use crate::targets::fleet::{ActionKind, FaultMode, SimulatedSystem};
use crate::time::Timestamp;
use crate::workflow::{Evidence, EvidenceKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeferReason {
    Load,
    Etl,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum RunnerAction {
    Idle,
    Claimed { job_id: JobId, plugin_version: String },
    Deferred { reason: DeferReason },
    Stepped { step: u32, deleted: u64 },
    Completed { evidence: Evidence },
    /// The runner let go of a job: an injected hang, or its claim was lost.
    Dropped { job_id: JobId, reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeldJob {
    pub job: DeletionJob,
    pub plugin: PluginDescriptor,
    pub step: u32,
    pub deleted: u64,
    pub expires_at: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
enum Report {
    Progress { step: u32, deleted: u64 },
    Renew,
    Complete { evidence: Evidence },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunnerState {
    pub runner_id: RunnerId,
    pub system_id: SystemId,
    pub token: String,
    pub poll_interval_secs: u64,
    pub current: Option<HeldJob>,
    next_poll: Timestamp,
    pending: Option<(JobId, Report)>,
}

impl RunnerState {
    pub fn new(runner_id: RunnerId, system_id: SystemId, token: impl Into<String>, poll_interval_secs: u64) -> Self {
        RunnerState {
            runner_id,
            system_id,
            token: token.into(),
            poll_interval_secs,
            current: None,
            next_poll: Timestamp(i64::MIN),
            pending: None,
        }
    }

    pub fn resolved_plugin(&self) -> Option<&PluginDescriptor> {
        self.current.as_ref().map(|h| &h.plugin)
    }

    pub fn is_busy(&self) -> bool {
        self.current.is_some() || self.pending.is_some()
    }
}

fn step_limit(plugin: &PluginDescriptor, system: &SimulatedSystem) -> usize {
    match plugin.behavior_spec.behavior {
        BuiltinBehavior::BulkDelete => usize::MAX,
        BuiltinBehavior::StepwiseDelete => plugin
            .behavior_spec
            .params
            .get("step_size")
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|n| *n >= 1)
            .unwrap_or(system.step_size as usize),
    }
}

/// Runs one tick of `runner` against its simulated system.
pub fn runner_tick(runner: &mut RunnerState, svc: &mut Service, system: &mut SimulatedSystem, now: Timestamp) -> Result<RunnerAction> {
    if let Some((job_id, report)) = runner.pending.take() {
        return send(runner, svc, system, job_id, report, now);
    }
    let Some(held) = runner.current.as_mut() else {
        return claim(runner, svc, system, now);
    };
    let job_id = held.job.id.clone();
    let reason = if system.overloaded(now) {
        Some((DeferReason::Load, ActionKind::DeferLoad))
    } else if system.in_etl_window(now) {
        Some((DeferReason::Etl, ActionKind::DeferEtl))
    } else {
        None
    };
    if let Some((reason, kind)) = reason {
        system.log(now, kind, Some(&job_id), json!({ "load": system.load_at(now) }));
        let half = (svc.settings().lease_secs / 2) as i64;
        if held.expires_at.secs() - now.secs() <= half {
            send(runner, svc, system, job_id, Report::Renew, now)?;
        }
        return Ok(RunnerAction::Deferred { reason });
    }
    let limit = step_limit(&held.plugin, system);
    let removed = system.delete_matching(&held.job.subject, held.job.purpose_filter.as_ref(), limit) as u64;
    let report = if removed == 0 {
        let plugin = (held.plugin.name.as_str(), &*held.plugin.version.to_string());
        let evidence = if held.deleted > 0 {
            Evidence::success(
                held.deleted,
                format!(
                    "deleted {} records for {} from {} in {} steps",
                    held.deleted, held.job.subject, system.system_id, held.step
                ),
                plugin,
                now,
            )
        } else {
            Evidence::no_data(format!("no records for {} on {}", held.job.subject, system.system_id), plugin, now)
        };
        system.log(now, ActionKind::Complete, Some(&job_id), json!({ "evidence": evidence.kind, "records": held.deleted }));
        Report::Complete { evidence }
    } else {
        let step = held.step + 1;
        let deleted = held.deleted + removed;
        system.log(now, ActionKind::DeleteStep, Some(&job_id), json!({ "step": step, "deleted": removed }));
        Report::Progress { step, deleted }
    };
    send(runner, svc, system, job_id, report, now)
}

fn claim(runner: &mut RunnerState, svc: &mut Service, system: &mut SimulatedSystem, now: Timestamp) -> Result<RunnerAction> {
    if now < runner.next_poll {
        return Ok(RunnerAction::Idle);
    }
    let job = match svc.claim_next(&runner.runner_id, &runner.system_id, &runner.token, now) {
        Ok(Some(job)) => job,
        Ok(None) => {
            runner.next_poll = now.plus_secs(runner.poll_interval_secs as i64);
            return Ok(RunnerAction::Idle);
        }
        Err(e) if e.is_fatal() => return Err(e),
        Err(e) => {
            tracing::warn!(runner = %runner.runner_id, error = %e, "claim rejected");
            runner.next_poll = now.plus_secs(runner.poll_interval_secs as i64);
            return Ok(RunnerAction::Idle);
        }
    };
    let expires_at = match &job.state {
        crate::management::JobState::Claimed { expires_at, .. } => *expires_at,
        _ => now,
    };
    let resolved = svc.resolve_plugin(&job.plugin_name, &job.plugin_version_req).cloned();
    let version = resolved.as_ref().map_or("-".to_string(), |p| p.version.to_string());
    system.log(now, ActionKind::Claim, Some(&job.id), json!({ "plugin": job.plugin_name, "version": version }));
    let fault = system.fault_active().cloned();
    system.claims_seen += 1;
    if let Some(f) = fault {
        system.log(now, ActionKind::Fault, Some(&job.id), json!({ "mode": f.mode, "message": f.message }));
        return match f.mode {
            FaultMode::Hang => Ok(RunnerAction::Dropped { job_id: job.id, reason: f.message }),
            FaultMode::Error => {
                let evidence = Evidence::error(f.message, (&job.plugin_name, &version), now);
                send(runner, svc, system, job.id, Report::Complete { evidence }, now)
            }
        };
    }
    match resolved {
        Ok(plugin) => {
            let job_id = job.id.clone();
            runner.current = Some(HeldJob { job, plugin, step: 0, deleted: 0, expires_at });
            Ok(RunnerAction::Claimed { job_id, plugin_version: version })
        }
        Err(e) => {
            let evidence = Evidence::error(format!("plugin resolution failed: {e}"), (&job.plugin_name, "-"), now);
            send(runner, svc, system, job.id, Report::Complete { evidence }, now)
        }
    }
}

fn send(
    runner: &mut RunnerState,
    svc: &mut Service,
    system: &mut SimulatedSystem,
    job_id: JobId,
    report: Report,
    now: Timestamp,
) -> Result<RunnerAction> {
    let rid = runner.runner_id.clone();
    let result = match &report {
        Report::Progress { step, .. } => svc.report_progress(&job_id, &rid, *step, now),
        Report::Renew => svc.renew_claim(&job_id, &rid, now),
        Report::Complete { evidence } => svc.report_completion(&job_id, &rid, evidence.clone(), now),
    };
    let job = match result {
        Ok(job) => job,
        Err(e) if e.is_fatal() => {
            runner.pending = Some((job_id, report));
            return Err(e);
        }
        Err(e) => {
            runner.current = None;
            system.log(now, ActionKind::Drop, Some(&job_id), json!({ "error": e.to_string() }));
            return Ok(RunnerAction::Dropped { job_id, reason: e.to_string() });
        }
    };
    let expires_at = match &job.state {
        crate::management::JobState::Claimed { expires_at, .. } | crate::management::JobState::InProgress { expires_at, .. } => {
            Some(*expires_at)
        }
        _ => None,
    };
    Ok(match report {
        Report::Progress { step, deleted } => {
            if let Some(h) = runner.current.as_mut() {
                h.step = step;
                h.deleted = deleted;
                h.expires_at = expires_at.unwrap_or(h.expires_at);
            }
            RunnerAction::Stepped { step, deleted }
        }
        Report::Renew => {
            if let Some(h) = runner.current.as_mut() {
                h.expires_at = expires_at.unwrap_or(h.expires_at);
            }
            system.log(now, ActionKind::RenewLease, Some(&job_id), json!({ "expires_at": expires_at }));
            RunnerAction::Deferred {
                reason: if system.overloaded(now) { DeferReason::Load } else { DeferReason::Etl },
            }
        }
        Report::Complete { evidence } => {
            runner.current = None;
            debug_assert!(evidence.kind != EvidenceKind::Success || evidence.records_affected.unwrap_or(0) > 0);
            RunnerAction::Completed { evidence }
        }
    })
}

