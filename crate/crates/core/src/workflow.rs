//! Erasure-request lifecycle.
//!
//! A request (the master task) moves through
//! `Submitted -> UnderReview -> Approved | Rejected`, then
//! `Approved -> Executing -> Completed | PartiallyCompleted | Failed`.
//! Execution tracks one sub-task per target system; each sub-task ends with
//! exactly one piece of [`Evidence`]. Retrying a failed sub-task appends a
//! fresh sibling and, if needed, moves a `PartiallyCompleted` parent back to
//! `Executing`; the failed attempt stays on record as superseded.
//!
//! `plan_*` methods validate a command against current state and return the
//! events it produces; [`Workflow::apply`] is the only mutator.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{JobId, PurposeId, RequestId, SubTaskId, SystemId};
use crate::policy::{ExemptionClaim, RetentionDecision};
use crate::time::Timestamp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SubjectKind {
    UserId,
    Email,
    BusinessId,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubjectRef {
    pub kind: SubjectKind,
    pub value: String,
}

impl SubjectRef {
    pub fn user(v: impl Into<String>) -> Self {
        SubjectRef { kind: SubjectKind::UserId, value: v.into() }
    }

    pub fn email(v: impl Into<String>) -> Self {
        SubjectRef { kind: SubjectKind::Email, value: v.into() }
    }

    pub fn business(v: impl Into<String>) -> Self {
        SubjectRef { kind: SubjectKind::BusinessId, value: v.into() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.value.trim().is_empty() {
            return Err(Error::Malformed("subject value must be non-empty".into()));
        }
        if self.kind == SubjectKind::Email && !self.value.contains('@') {
            return Err(Error::Malformed(format!("'{}' is not an email address", self.value)));
        }
        Ok(())
    }
}

impl fmt::Display for SubjectRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            SubjectKind::UserId => "user",
            SubjectKind::Email => "email",
            SubjectKind::BusinessId => "business",
        };
        write!(f, "{kind}:{}", self.value)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestScope {
    pub subject: SubjectRef,
    #[serde(default)]
    pub purpose_filter: Option<PurposeId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "via", content = "identity", rename_all = "snake_case")]
pub enum Origin {
    Manual(String),
    Api(String),
}

impl Origin {
    pub fn identity(&self) -> &str {
        match self {
            Origin::Manual(who) | Origin::Api(who) => who,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RequestState {
    Submitted,
    UnderReview,
    Approved,
    Rejected,
    Executing,
    Completed,
    PartiallyCompleted,
    Failed,
}

impl RequestState {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            RequestState::Rejected | RequestState::Completed | RequestState::PartiallyCompleted | RequestState::Failed
        )
    }

    pub fn is_pre_execution(self) -> bool {
        matches!(self, RequestState::Submitted | RequestState::UnderReview)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewDecision {
    Approve,
    Reject,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Approval {
    pub reviewer: String,
    pub decision: ReviewDecision,
    pub timestamp: Timestamp,
    pub comment: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErasureRequest {
    pub id: RequestId,
    pub scope: RequestScope,
    pub origin: Origin,
    pub state: RequestState,
    pub submitted_at: Timestamp,
    pub deadline: Timestamp,
    pub approvals: Vec<Approval>,
    pub exemptions: Vec<ExemptionClaim>,
    pub subtask_ids: Vec<SubTaskId>,
    pub expanded: bool,
    pub overdue: bool,
    pub closed_at: Option<Timestamp>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SubTaskState {
    Pending,
    Dispatched,
    InProgress,
    Done,
    Failed,
    NoData,
}

impl SubTaskState {
    pub fn is_terminal(self) -> bool {
        matches!(self, SubTaskState::Done | SubTaskState::Failed | SubTaskState::NoData)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EvidenceKind {
    Success,
    NoDataFound,
    Error,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub kind: EvidenceKind,
    /// Log snippet, response body or return code.
    pub payload: String,
    pub plugin_name: String,
    pub plugin_version: String,
    pub produced_at: Timestamp,
    pub records_affected: Option<u64>,
}

impl Evidence {
    pub fn success(records: u64, payload: impl Into<String>, plugin: (&str, &str), at: Timestamp) -> Self {
        Evidence {
            kind: EvidenceKind::Success,
            payload: payload.into(),
            plugin_name: plugin.0.into(),
            plugin_version: plugin.1.into(),
            produced_at: at,
            records_affected: Some(records),
        }
    }

    pub fn no_data(payload: impl Into<String>, plugin: (&str, &str), at: Timestamp) -> Self {
        Evidence {
            kind: EvidenceKind::NoDataFound,
            payload: payload.into(),
            plugin_name: plugin.0.into(),
            plugin_version: plugin.1.into(),
            produced_at: at,
            records_affected: Some(0),
        }
    }

    pub fn error(payload: impl Into<String>, plugin: (&str, &str), at: Timestamp) -> Self {
        Evidence {
            kind: EvidenceKind::Error,
            payload: payload.into(),
            plugin_name: plugin.0.into(),
            plugin_version: plugin.1.into(),
            produced_at: at,
            records_affected: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::MalformedEvidence(m.into()));
        match self.kind {
            EvidenceKind::Success if !self.records_affected.is_some_and(|n| n >= 1) => {
                bad("success evidence needs records_affected >= 1")
            }
            EvidenceKind::NoDataFound if self.records_affected != Some(0) => {
                bad("no-data evidence needs records_affected = 0")
            }
            EvidenceKind::Error if self.payload.trim().is_empty() => bad("error evidence needs a payload"),
            _ => Ok(()),
        }
    }

    pub fn subtask_state(&self) -> SubTaskState {
        match self.kind {
            EvidenceKind::Success => SubTaskState::Done,
            EvidenceKind::NoDataFound => SubTaskState::NoData,
            EvidenceKind::Error => SubTaskState::Failed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubTask {
    pub id: SubTaskId,
    pub request_id: RequestId,
    pub system_id: SystemId,
    pub state: SubTaskState,
    pub job_id: Option<JobId>,
    pub evidence: Option<Evidence>,
    pub opened_at: Timestamp,
    pub closed_at: Option<Timestamp>,
    /// Last execution step reported by the runner.
    pub last_step: Option<u32>,
    /// Set when a retention policy blocked the deletion.
    pub retention: Option<RetentionDecision>,
    pub retry_of: Option<SubTaskId>,
    pub superseded_by: Option<SubTaskId>,
}

impl SubTask {
    pub fn is_active(&self) -> bool {
        self.superseded_by.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ProgressStatus {
    Dispatched { job_id: JobId },
    InProgress { step: Option<u32> },
}

/// Terminal state of a master task given the states of its active sub-tasks;
/// `None` while any of them is still running.
pub fn closure_state(states: &[SubTaskState]) -> Option<RequestState> {
    if states.iter().any(|s| !s.is_terminal()) {
        return None;
    }
    if states.iter().all(|s| matches!(s, SubTaskState::Done | SubTaskState::NoData)) {
        Some(RequestState::Completed)
    } else if states.iter().all(|s| *s == SubTaskState::Failed) {
        Some(RequestState::Failed)
    } else {
        Some(RequestState::PartiallyCompleted)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WorkflowEvent {
    Submitted { request: ErasureRequest },
    ReviewOpened { request_id: RequestId, at: Timestamp },
    Reviewed { request_id: RequestId, approval: Approval, state: RequestState },
    ExemptionRecorded { request_id: RequestId, claim: ExemptionClaim },
    SubtasksOpened { request_id: RequestId, subtasks: Vec<SubTask>, at: Timestamp },
    SubtaskProgressed { subtask_id: SubTaskId, state: SubTaskState, job_id: Option<JobId>, step: Option<u32>, at: Timestamp },
    SubtaskClosed {
        subtask_id: SubTaskId,
        state: SubTaskState,
        evidence: Evidence,
        retention: Option<RetentionDecision>,
        at: Timestamp,
    },
    RequestClosed { request_id: RequestId, state: RequestState, at: Timestamp },
    SubtaskRetried { original: SubTaskId, retry: SubTask, operator: String, reopened: bool, at: Timestamp },
    RequestOverdue { request_id: RequestId, at: Timestamp },
}

impl WorkflowEvent {
    pub fn request_id<'a>(&'a self, wf: &'a Workflow) -> Option<&'a RequestId> {
        match self {
            WorkflowEvent::Submitted { request } => Some(&request.id),
            WorkflowEvent::ReviewOpened { request_id, .. }
            | WorkflowEvent::Reviewed { request_id, .. }
            | WorkflowEvent::ExemptionRecorded { request_id, .. }
            | WorkflowEvent::SubtasksOpened { request_id, .. }
            | WorkflowEvent::RequestClosed { request_id, .. }
            | WorkflowEvent::RequestOverdue { request_id, .. } => Some(request_id),
            WorkflowEvent::SubtaskRetried { retry, .. } => Some(&retry.request_id),
            WorkflowEvent::SubtaskProgressed { subtask_id, .. } | WorkflowEvent::SubtaskClosed { subtask_id, .. } => {
                wf.subtasks.get(subtask_id).map(|s| &s.request_id)
            }
        }
    }

    pub fn action(&self) -> &'static str {
        match self {
            WorkflowEvent::Submitted { .. } => "request.submitted",
            WorkflowEvent::ReviewOpened { .. } => "request.review_opened",
            WorkflowEvent::Reviewed { .. } => "request.reviewed",
            WorkflowEvent::ExemptionRecorded { .. } => "request.exemption_recorded",
            WorkflowEvent::SubtasksOpened { .. } => "request.subtasks_opened",
            WorkflowEvent::SubtaskProgressed { state: SubTaskState::Dispatched, .. } => "subtask.dispatched",
            WorkflowEvent::SubtaskProgressed { .. } => "subtask.in_progress",
            WorkflowEvent::SubtaskClosed { .. } => "subtask.closed",
            WorkflowEvent::RequestClosed { .. } => "request.closed",
            WorkflowEvent::SubtaskRetried { .. } => "subtask.retried",
            WorkflowEvent::RequestOverdue { .. } => "request.overdue",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Workflow {
    requests: BTreeMap<RequestId, ErasureRequest>,
    subtasks: BTreeMap<SubTaskId, SubTask>,
    next_request: u64,
    next_subtask: u64,
    mutations: u64,
}

impl Workflow {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn request(&self, id: &RequestId) -> Result<&ErasureRequest> {
        self.requests
            .get(id)
            .ok_or_else(|| Error::UnknownRequest(id.to_string()))
    }

    pub fn subtask(&self, id: &SubTaskId) -> Result<&SubTask> {
        self.subtasks
            .get(id)
            .ok_or_else(|| Error::UnknownSubTask(id.to_string()))
    }

    pub fn requests(&self) -> impl Iterator<Item = &ErasureRequest> {
        self.requests.values()
    }

    pub fn subtasks(&self) -> impl Iterator<Item = &SubTask> {
        self.subtasks.values()
    }

    /// Every attempt for the request, in creation order.
    pub fn subtasks_of(&self, request: &ErasureRequest) -> Vec<&SubTask> {
        request
            .subtask_ids
            .iter()
            .filter_map(|id| self.subtasks.get(id))
            .collect()
    }

    pub fn active_subtasks_of(&self, request: &ErasureRequest) -> Vec<&SubTask> {
        self.subtasks_of(request).into_iter().filter(|s| s.is_active()).collect()
    }

    pub fn mutations(&self) -> u64 {
        self.mutations
    }

    pub fn plan_submit(
        &self,
        scope: RequestScope,
        origin: Origin,
        now: Timestamp,
        sla_days: u32,
    ) -> Result<WorkflowEvent> {
        scope.subject.validate()?;
        if origin.identity().trim().is_empty() {
            return Err(Error::Malformed("origin identity must be non-empty".into()));
        }
        let id = RequestId::new(format!("req-{:06}", self.next_request + 1));
        Ok(WorkflowEvent::Submitted {
            request: ErasureRequest {
                id,
                scope,
                origin,
                state: RequestState::Submitted,
                submitted_at: now,
                deadline: now.plus_days(i64::from(sla_days)),
                approvals: Vec::new(),
                exemptions: Vec::new(),
                subtask_ids: Vec::new(),
                expanded: false,
                overdue: false,
                closed_at: None,
            },
        })
    }

    /// Records a review. A reject closes the request at once; approvals move
    /// it to `Approved` when `quorum` distinct reviewers have approved.
    pub fn plan_review(
        &self,
        id: &RequestId,
        reviewer: &str,
        decision: ReviewDecision,
        comment: &str,
        now: Timestamp,
        quorum: u32,
    ) -> Result<Vec<WorkflowEvent>> {
        let req = self.request(id)?;
        if !req.state.is_pre_execution() {
            return Err(Error::InvalidState(format!("request {id} is {:?}, not reviewable", req.state)));
        }
        if reviewer.trim().is_empty() {
            return Err(Error::Malformed("reviewer identity must be non-empty".into()));
        }
        if let Origin::Manual(operator) = &req.origin {
            if operator == reviewer {
                return Err(Error::SelfApproval(reviewer.to_string()));
            }
        }
        if req.approvals.iter().any(|a| a.reviewer == reviewer) {
            return Err(Error::DuplicateReviewer(reviewer.to_string()));
        }
        let mut events = Vec::new();
        if req.state == RequestState::Submitted {
            events.push(WorkflowEvent::ReviewOpened { request_id: id.clone(), at: now });
        }
        let state = match decision {
            ReviewDecision::Reject => RequestState::Rejected,
            ReviewDecision::Approve => {
                let approvals = req
                    .approvals
                    .iter()
                    .filter(|a| a.decision == ReviewDecision::Approve)
                    .count() as u32
                    + 1;
                if approvals >= quorum.max(1) {
                    RequestState::Approved
                } else {
                    RequestState::UnderReview
                }
            }
        };
        events.push(WorkflowEvent::Reviewed {
            request_id: id.clone(),
            approval: Approval {
                reviewer: reviewer.to_string(),
                decision,
                timestamp: now,
                comment: comment.to_string(),
            },
            state,
        });
        Ok(events)
    }

    pub fn plan_exemption(&self, id: &RequestId, claim: ExemptionClaim) -> Result<WorkflowEvent> {
        let req = self.request(id)?;
        if !req.state.is_pre_execution() {
            return Err(Error::InvalidState(format!(
                "request {id} is {:?}; exemptions are recorded before execution",
                req.state
            )));
        }
        claim.validate()?;
        Ok(WorkflowEvent::ExemptionRecorded { request_id: id.clone(), claim })
    }

    /// One pending sub-task per system. An empty fleet closes the request as
    /// `Completed` right away.
    pub fn plan_open_subtasks(&self, id: &RequestId, systems: &[SystemId], now: Timestamp) -> Result<Vec<WorkflowEvent>> {
        let req = self.request(id)?;
        if req.expanded {
            return Err(Error::AlreadyExpanded(id.to_string()));
        }
        if req.state != RequestState::Approved {
            return Err(Error::InvalidState(format!("request {id} is {:?}, not Approved", req.state)));
        }
        let subtasks = systems
            .iter()
            .enumerate()
            .map(|(i, system)| SubTask {
                id: SubTaskId::new(format!("st-{:06}", self.next_subtask + 1 + i as u64)),
                request_id: id.clone(),
                system_id: system.clone(),
                state: SubTaskState::Pending,
                job_id: None,
                evidence: None,
                opened_at: now,
                closed_at: None,
                last_step: None,
                retention: None,
                retry_of: None,
                superseded_by: None,
            })
            .collect::<Vec<_>>();
        let empty = subtasks.is_empty();
        let mut events = vec![WorkflowEvent::SubtasksOpened { request_id: id.clone(), subtasks, at: now }];
        if empty {
            events.push(WorkflowEvent::RequestClosed {
                request_id: id.clone(),
                state: RequestState::Completed,
                at: now,
            });
        }
        Ok(events)
    }

    pub fn plan_progress(&self, id: &SubTaskId, status: ProgressStatus, now: Timestamp) -> Result<WorkflowEvent> {
        let st = self.subtask(id)?;
        let illegal = || {
            Err(Error::InvalidTransition(format!(
                "sub-task {id}: {:?} -> {:?}",
                st.state, status
            )))
        };
        match (&st.state, &status) {
            (SubTaskState::Pending, ProgressStatus::Dispatched { job_id }) => Ok(WorkflowEvent::SubtaskProgressed {
                subtask_id: id.clone(),
                state: SubTaskState::Dispatched,
                job_id: Some(job_id.clone()),
                step: None,
                at: now,
            }),
            (SubTaskState::Dispatched | SubTaskState::InProgress, ProgressStatus::InProgress { step }) => {
                Ok(WorkflowEvent::SubtaskProgressed {
                    subtask_id: id.clone(),
                    state: SubTaskState::InProgress,
                    job_id: None,
                    step: *step,
                    at: now,
                })
            }
            _ => illegal(),
        }
    }

    /// Attaches evidence from a finished job.
    pub fn plan_complete(&self, id: &SubTaskId, evidence: Evidence, now: Timestamp) -> Result<WorkflowEvent> {
        let st = self.subtask(id)?;
        if !matches!(st.state, SubTaskState::Dispatched | SubTaskState::InProgress) {
            return Err(Error::InvalidState(format!("sub-task {id} is {:?}", st.state)));
        }
        evidence.validate()?;
        Ok(WorkflowEvent::SubtaskClosed {
            subtask_id: id.clone(),
            state: evidence.subtask_state(),
            evidence,
            retention: None,
            at: now,
        })
    }

    /// Closes a pending sub-task without dispatch because a retention policy
    /// (or a registry change) blocks the deletion.
    pub fn plan_close_undispatched(
        &self,
        id: &SubTaskId,
        evidence: Evidence,
        retention: Option<RetentionDecision>,
        now: Timestamp,
    ) -> Result<WorkflowEvent> {
        let st = self.subtask(id)?;
        if st.state != SubTaskState::Pending {
            return Err(Error::InvalidState(format!("sub-task {id} is {:?}, not Pending", st.state)));
        }
        if evidence.kind != crate::workflow::EvidenceKind::Error {
            return Err(Error::MalformedEvidence("undispatched sub-tasks close with error evidence".into()));
        }
        evidence.validate()?;
        Ok(WorkflowEvent::SubtaskClosed {
            subtask_id: id.clone(),
            state: SubTaskState::Failed,
            evidence,
            retention,
            at: now,
        })
    }

    /// `Ok(None)` while any active sub-task is still running.
    pub fn plan_close(&self, id: &RequestId, now: Timestamp) -> Result<Option<WorkflowEvent>> {
        let req = self.request(id)?;
        if req.state != RequestState::Executing {
            return Err(Error::InvalidState(format!("request {id} is {:?}, not Executing", req.state)));
        }
        let states: Vec<_> = self.active_subtasks_of(req).iter().map(|s| s.state).collect();
        Ok(closure_state(&states).map(|state| WorkflowEvent::RequestClosed {
            request_id: id.clone(),
            state,
            at: now,
        }))
    }

    pub fn plan_retry(&self, id: &SubTaskId, operator: &str, now: Timestamp) -> Result<WorkflowEvent> {
        let st = self.subtask(id)?;
        if st.state != SubTaskState::Failed {
            return Err(Error::InvalidState(format!("sub-task {id} is {:?}, only Failed can be retried", st.state)));
        }
        if let Some(by) = &st.superseded_by {
            return Err(Error::InvalidState(format!("sub-task {id} was already retried as {by}")));
        }
        let parent = self.request(&st.request_id)?;
        if !matches!(parent.state, RequestState::Executing | RequestState::PartiallyCompleted) {
            return Err(Error::InvalidState(format!(
                "request {} is {:?}; retry needs Executing or PartiallyCompleted",
                parent.id, parent.state
            )));
        }
        Ok(WorkflowEvent::SubtaskRetried {
            original: id.clone(),
            retry: SubTask {
                id: SubTaskId::new(format!("st-{:06}", self.next_subtask + 1)),
                request_id: st.request_id.clone(),
                system_id: st.system_id.clone(),
                state: SubTaskState::Pending,
                job_id: None,
                evidence: None,
                opened_at: now,
                closed_at: None,
                last_step: None,
                retention: None,
                retry_of: Some(id.clone()),
                superseded_by: None,
            },
            operator: operator.to_string(),
            reopened: parent.state == RequestState::PartiallyCompleted,
            at: now,
        })
    }

    /// Flags a request the first time it is seen past its deadline.
    pub fn plan_overdue(&self, id: &RequestId, now: Timestamp) -> Result<Option<WorkflowEvent>> {
        let req = self.request(id)?;
        Ok((!req.state.is_terminal() && !req.overdue && now > req.deadline)
            .then(|| WorkflowEvent::RequestOverdue { request_id: id.clone(), at: now }))
    }

    pub fn apply(&mut self, event: &WorkflowEvent) {
        self.mutations += 1;
        match event {
            WorkflowEvent::Submitted { request } => {
                self.next_request += 1;
                self.requests.insert(request.id.clone(), request.clone());
            }
            WorkflowEvent::ReviewOpened { request_id, .. } => {
                if let Some(r) = self.requests.get_mut(request_id) {
                    r.state = RequestState::UnderReview;
                }
            }
            WorkflowEvent::Reviewed { request_id, approval, state } => {
                if let Some(r) = self.requests.get_mut(request_id) {
                    r.approvals.push(approval.clone());
                    r.state = *state;
                    if state.is_terminal() {
                        r.closed_at = Some(approval.timestamp);
                    }
                }
            }
            WorkflowEvent::ExemptionRecorded { request_id, claim } => {
                if let Some(r) = self.requests.get_mut(request_id) {
                    r.exemptions.push(claim.clone());
                    r.exemptions.sort_by_key(|c| c.timestamp);
                }
            }
            WorkflowEvent::SubtasksOpened { request_id, subtasks, .. } => {
                self.next_subtask += subtasks.len() as u64;
                if let Some(r) = self.requests.get_mut(request_id) {
                    r.expanded = true;
                    r.state = RequestState::Executing;
                    r.subtask_ids.extend(subtasks.iter().map(|s| s.id.clone()));
                }
                for s in subtasks {
                    self.subtasks.insert(s.id.clone(), s.clone());
                }
            }
            WorkflowEvent::SubtaskProgressed { subtask_id, state, job_id, step, .. } => {
                if let Some(s) = self.subtasks.get_mut(subtask_id) {
                    s.state = *state;
                    if job_id.is_some() {
                        s.job_id = job_id.clone();
                    }
                    if let Some(step) = step {
                        s.last_step = Some(s.last_step.map_or(*step, |l| l.max(*step)));
                    }
                }
            }
            WorkflowEvent::SubtaskClosed { subtask_id, state, evidence, retention, at } => {
                if let Some(s) = self.subtasks.get_mut(subtask_id) {
                    s.state = *state;
                    s.evidence = Some(evidence.clone());
                    s.retention = retention.clone();
                    s.closed_at = Some(*at);
                }
            }
            WorkflowEvent::RequestClosed { request_id, state, at } => {
                if let Some(r) = self.requests.get_mut(request_id) {
                    r.state = *state;
                    r.closed_at = Some(*at);
                }
            }
            WorkflowEvent::SubtaskRetried { original, retry, reopened, .. } => {
                self.next_subtask += 1;
                if let Some(s) = self.subtasks.get_mut(original) {
                    s.superseded_by = Some(retry.id.clone());
                }
                if let Some(r) = self.requests.get_mut(&retry.request_id) {
                    r.subtask_ids.push(retry.id.clone());
                    if *reopened {
                        r.state = RequestState::Executing;
                        r.closed_at = None;
                    }
                }
                self.subtasks.insert(retry.id.clone(), retry.clone());
            }
            WorkflowEvent::RequestOverdue { request_id, .. } => {
                if let Some(r) = self.requests.get_mut(request_id) {
                    r.overdue = true;
                }
            }
        }
    }
}
