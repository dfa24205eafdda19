//! Erasure reports: the per-request proof of what was deleted where.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{PolicyId, PurposeId, RequestId, SubTaskId, SystemId};
use crate::policy::ExemptionClaim;
use crate::service::State;
use crate::time::Timestamp;
use crate::workflow::{Approval, EvidenceKind, Origin, RequestState, SubTaskState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attempt {
    Active,
    Superseded,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionLine {
    pub policy_id: Option<PolicyId>,
    pub earliest_deletion: Option<Timestamp>,
    pub rationale: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskLine {
    pub subtask_id: SubTaskId,
    pub system_id: SystemId,
    pub system_name: String,
    pub geo_region: String,
    pub state: SubTaskState,
    pub attempt: Attempt,
    pub retry_of: Option<SubTaskId>,
    pub evidence_kind: Option<EvidenceKind>,
    pub records_affected: Option<u64>,
    pub plugin_name: Option<String>,
    pub plugin_version: Option<String>,
    pub payload: Option<String>,
    pub opened_at: Timestamp,
    pub closed_at: Option<Timestamp>,
    pub retention: Option<RetentionLine>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErasureReport {
    pub request_id: RequestId,
    pub subject: String,
    pub purpose_filter: Option<PurposeId>,
    pub origin: Origin,
    pub outcome: RequestState,
    pub submitted_at: Timestamp,
    pub deadline: Timestamp,
    pub closed_at: Option<Timestamp>,
    pub overdue: bool,
    pub approvals: Vec<Approval>,
    pub exemptions: Vec<ExemptionClaim>,
    pub subtasks: Vec<SubtaskLine>,
}

/// Builds the report for a terminal request.
pub fn generate_report(state: &State, id: &RequestId) -> Result<ErasureReport> {
    let req = state.workflow.request(id)?;
    if !req.state.is_terminal() {
        return Err(Error::InvalidState(format!("request {id} is {:?}; reports need a terminal request", req.state)));
    }
    let subtasks = state
        .workflow
        .subtasks_of(req)
        .into_iter()
        .map(|st| {
            let sys = state.registry.system(&st.system_id).map(|v| &v.record);
            let ev = st.evidence.as_ref();
            SubtaskLine {
                subtask_id: st.id.clone(),
                system_id: st.system_id.clone(),
                system_name: sys.map(|s| s.name.clone()).unwrap_or_default(),
                geo_region: sys.map(|s| s.geo_region.clone()).unwrap_or_default(),
                state: st.state,
                attempt: if st.is_active() { Attempt::Active } else { Attempt::Superseded },
                retry_of: st.retry_of.clone(),
                evidence_kind: ev.map(|e| e.kind),
                records_affected: ev.and_then(|e| e.records_affected),
                plugin_name: ev.map(|e| e.plugin_name.clone()),
                plugin_version: ev.map(|e| e.plugin_version.clone()),
                payload: ev.map(|e| e.payload.clone()),
                opened_at: st.opened_at,
                closed_at: st.closed_at,
                retention: st.retention.as_ref().filter(|d| d.is_deny()).map(|d| RetentionLine {
                    policy_id: d.policy_id.clone(),
                    earliest_deletion: d.earliest_deletion,
                    rationale: d.rationale.clone(),
                }),
            }
        })
        .collect();
    Ok(ErasureReport {
        request_id: req.id.clone(),
        subject: req.scope.subject.to_string(),
        purpose_filter: req.scope.purpose_filter.clone(),
        origin: req.origin.clone(),
        outcome: req.state,
        submitted_at: req.submitted_at,
        deadline: req.deadline,
        closed_at: req.closed_at,
        overdue: req.overdue,
        approvals: req.approvals.clone(),
        exemptions: req.exemptions.clone(),
        subtasks,
    })
}

fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or("-".into(), |v| v.to_string())
}

impl ErasureReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let w = &mut out;
        let _ = writeln!(w, "Erasure report {}", self.request_id);
        let _ = writeln!(w, "subject:   {}", self.subject);
        if let Some(p) = &self.purpose_filter {
            let _ = writeln!(w, "purpose:   {p}");
        }
        let _ = writeln!(w, "origin:    {:?} ({})", self.origin, self.origin.identity());
        let _ = writeln!(w, "outcome:   {:?}", self.outcome);
        let _ = writeln!(w, "submitted: {}", self.submitted_at.to_rfc3339());
        let _ = writeln!(w, "deadline:  {}{}", self.deadline.to_rfc3339(), if self.overdue { " (overdue)" } else { "" });
        let _ = writeln!(w, "closed:    {}", self.closed_at.map_or("-".into(), |t| t.to_rfc3339()));
        for a in &self.approvals {
            let _ = writeln!(w, "review:    {:?} by {} at {} {}", a.decision, a.reviewer, a.timestamp.to_rfc3339(), a.comment);
        }
        for e in &self.exemptions {
            let _ = writeln!(
                w,
                "exemption: {:?} claimed by {} at {}: {}",
                e.category,
                e.claimed_by,
                e.timestamp.to_rfc3339(),
                e.justification
            );
        }
        let _ = writeln!(w, "sub-tasks: {}", self.subtasks.len());
        for s in &self.subtasks {
            let _ = writeln!(
                w,
                "  {} {} [{}] {} ({:?}) evidence={} records={} plugin={}@{} opened={} closed={}",
                s.subtask_id,
                s.system_name,
                s.geo_region,
                s.system_id,
                s.attempt,
                s.evidence_kind.map_or("-".into(), |k| format!("{k:?}")),
                opt(&s.records_affected),
                opt(&s.plugin_name),
                opt(&s.plugin_version),
                s.opened_at.to_rfc3339(),
                s.closed_at.map_or("-".into(), |t| t.to_rfc3339()),
            );
            if let Some(r) = &s.retention {
                let _ = writeln!(
                    w,
                    "    retained under policy {} until {}: {}",
                    opt(&r.policy_id),
                    r.earliest_deletion.map_or("-".into(), |t| t.to_rfc3339()),
                    r.rationale
                );
            } else if let Some(p) = &s.payload {
                let _ = writeln!(w, "    {p}");
            }
        }
        out
    }
}
