//! Deletion job queue with claim leases.
//!
//! Jobs are keyed by an idempotency key derived from `(request, sub-task)`.
//! Runners claim the oldest queued job for their system; a claim is a lease
//! that progress reports and renewals extend. Expired leases put the job back
//! in the queue until the requeue budget is spent, after which the job fails
//! with lease-exhausted evidence.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{JobId, PurposeId, RequestId, RunnerId, SubTaskId, SystemId};
use crate::plugins::VersionConstraint;
use crate::registry::DeletionDirective;
use crate::time::Timestamp;
use crate::workflow::{Evidence, EvidenceKind, SubjectRef};

pub const DEFAULT_LEASE_SECS: u64 = 60;
pub const DEFAULT_MAX_REQUEUES: u32 = 3;
pub const LEASE_EXHAUSTED: &str = "claim lease exhausted";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Claimed { runner: RunnerId, expires_at: Timestamp },
    InProgress { runner: RunnerId, step: u32, expires_at: Timestamp },
    Done { evidence: Evidence },
    Failed { evidence: Evidence },
}

impl JobState {
    pub fn is_terminal(&self) -> bool {
        matches!(self, JobState::Done { .. } | JobState::Failed { .. })
    }

    pub fn holder(&self) -> Option<&RunnerId> {
        match self {
            JobState::Claimed { runner, .. } | JobState::InProgress { runner, .. } => Some(runner),
            _ => None,
        }
    }

    pub fn evidence(&self) -> Option<&Evidence> {
        match self {
            JobState::Done { evidence } | JobState::Failed { evidence } => Some(evidence),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeletionJob {
    pub id: JobId,
    pub request_id: RequestId,
    pub subtask_id: SubTaskId,
    pub system_id: SystemId,
    pub subject: SubjectRef,
    pub purpose_filter: Option<PurposeId>,
    pub plugin_name: String,
    pub plugin_version_req: VersionConstraint,
    pub plugin_config: BTreeMap<String, String>,
    /// Opaque handle the runner presents to the target system.
    pub credential_ref: String,
    pub state: JobState,
    pub enqueued_at: Timestamp,
    #[serde(default)]
    pub requeue_count: u32,
    /// Position in the global enqueue order; the FIFO key.
    #[serde(default)]
    pub enqueue_seq: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ManagementEvent {
    Enqueued { job: DeletionJob },
    /// `directive` is the registry directive at claim time; the job runs with it.
    Claimed { job_id: JobId, runner: RunnerId, expires_at: Timestamp, directive: Option<DeletionDirective>, at: Timestamp },
    Progressed { job_id: JobId, step: u32, expires_at: Timestamp, at: Timestamp },
    LeaseRenewed { job_id: JobId, expires_at: Timestamp, at: Timestamp },
    Completed { job_id: JobId, evidence: Evidence, at: Timestamp },
    Requeued { job_id: JobId, requeue_count: u32, at: Timestamp },
    Exhausted { job_id: JobId, evidence: Evidence, at: Timestamp },
}

impl ManagementEvent {
    pub fn job_id(&self) -> &JobId {
        match self {
            ManagementEvent::Enqueued { job } => &job.id,
            ManagementEvent::Claimed { job_id, .. }
            | ManagementEvent::Progressed { job_id, .. }
            | ManagementEvent::LeaseRenewed { job_id, .. }
            | ManagementEvent::Completed { job_id, .. }
            | ManagementEvent::Requeued { job_id, .. }
            | ManagementEvent::Exhausted { job_id, .. } => job_id,
        }
    }

    pub fn action(&self) -> &'static str {
        match self {
            ManagementEvent::Enqueued { .. } => "job.enqueued",
            ManagementEvent::Claimed { .. } => "job.claimed",
            ManagementEvent::Progressed { .. } => "job.progressed",
            ManagementEvent::LeaseRenewed { .. } => "job.lease_renewed",
            ManagementEvent::Completed { .. } => "job.completed",
            ManagementEvent::Requeued { .. } => "job.requeued",
            ManagementEvent::Exhausted { .. } => "job.exhausted",
        }
    }
}

/// Snapshot of job counts by state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobCensus {
    pub enqueued: u64,
    pub queued: u64,
    pub claimed: u64,
    pub in_progress: u64,
    pub done: u64,
    pub failed: u64,
}

impl JobCensus {
    pub fn is_conserved(&self) -> bool {
        self.enqueued == self.queued + self.claimed + self.in_progress + self.done + self.failed
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Management {
    jobs: BTreeMap<JobId, DeletionJob>,
    /// Queued jobs per system, ordered by `enqueue_seq`.
    queues: BTreeMap<SystemId, BTreeSet<(u64, JobId)>>,
    next_seq: u64,
    mutations: u64,
}

impl Management {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn job(&self, id: &JobId) -> Result<&DeletionJob> {
        self.jobs.get(id).ok_or_else(|| Error::UnknownJob(id.to_string()))
    }

    pub fn jobs(&self) -> impl Iterator<Item = &DeletionJob> {
        self.jobs.values()
    }

    pub fn jobs_in_enqueue_order(&self) -> Vec<&DeletionJob> {
        let mut v: Vec<_> = self.jobs.values().collect();
        v.sort_by_key(|j| j.enqueue_seq);
        v
    }

    pub fn queue_len(&self, system: &SystemId) -> usize {
        self.queues.get(system).map_or(0, BTreeSet::len)
    }

    pub fn mutations(&self) -> u64 {
        self.mutations
    }

    pub fn census(&self) -> JobCensus {
        let mut c = JobCensus { enqueued: self.jobs.len() as u64, ..JobCensus::default() };
        for j in self.jobs.values() {
            match j.state {
                JobState::Queued => c.queued += 1,
                JobState::Claimed { .. } => c.claimed += 1,
                JobState::InProgress { .. } => c.in_progress += 1,
                JobState::Done { .. } => c.done += 1,
                JobState::Failed { .. } => c.failed += 1,
            }
        }
        c
    }

    /// Rejects a job whose idempotency key is already known, reporting that key.
    pub fn plan_enqueue(&self, mut job: DeletionJob) -> Result<ManagementEvent> {
        if self.jobs.contains_key(&job.id) {
            return Err(Error::DuplicateJob(job.id));
        }
        if job.plugin_name.trim().is_empty() {
            return Err(Error::Malformed("job plugin_name must be non-empty".into()));
        }
        job.state = JobState::Queued;
        job.requeue_count = 0;
        job.enqueue_seq = self.next_seq;
        Ok(ManagementEvent::Enqueued { job })
    }

    /// Oldest queued job for `system`, as a claim event.
    pub fn plan_claim(
        &self,
        runner: &RunnerId,
        system: &SystemId,
        now: Timestamp,
        lease_secs: u64,
        directive: Option<&DeletionDirective>,
    ) -> Option<ManagementEvent> {
        let (_, job_id) = self.queues.get(system)?.iter().next()?;
        Some(ManagementEvent::Claimed {
            job_id: job_id.clone(),
            runner: runner.clone(),
            expires_at: now.plus_secs(lease_secs as i64),
            directive: directive.cloned(),
            at: now,
        })
    }

    fn held_by<'a>(&'a self, job_id: &JobId, runner: &RunnerId) -> Result<&'a DeletionJob> {
        let job = self.job(job_id)?;
        match job.state.holder() {
            Some(h) if h == runner => Ok(job),
            _ => Err(Error::NotClaimHolder { job: job_id.to_string(), runner: runner.to_string() }),
        }
    }

    pub fn plan_progress(
        &self,
        job_id: &JobId,
        runner: &RunnerId,
        step: u32,
        now: Timestamp,
        lease_secs: u64,
    ) -> Result<ManagementEvent> {
        let job = self.held_by(job_id, runner)?;
        let last = match job.state {
            JobState::InProgress { step, .. } => step,
            _ => 0,
        };
        if step <= last {
            return Err(Error::StaleStep { step, last });
        }
        Ok(ManagementEvent::Progressed {
            job_id: job_id.clone(),
            step,
            expires_at: now.plus_secs(lease_secs as i64),
            at: now,
        })
    }

    pub fn plan_renew(&self, job_id: &JobId, runner: &RunnerId, now: Timestamp, lease_secs: u64) -> Result<ManagementEvent> {
        self.held_by(job_id, runner)?;
        Ok(ManagementEvent::LeaseRenewed {
            job_id: job_id.clone(),
            expires_at: now.plus_secs(lease_secs as i64),
            at: now,
        })
    }

    pub fn plan_completion(&self, job_id: &JobId, runner: &RunnerId, evidence: Evidence, now: Timestamp) -> Result<ManagementEvent> {
        self.held_by(job_id, runner)?;
        evidence.validate()?;
        Ok(ManagementEvent::Completed { job_id: job_id.clone(), evidence, at: now })
    }

    /// Requeues jobs whose lease ran out at or before `now`; jobs already
    /// requeued `max_requeues` times fail instead.
    pub fn plan_expiry(&self, now: Timestamp, max_requeues: u32) -> Vec<ManagementEvent> {
        self.jobs_in_enqueue_order()
            .into_iter()
            .filter_map(|j| {
                let expires_at = match &j.state {
                    JobState::Claimed { expires_at, .. } | JobState::InProgress { expires_at, .. } => *expires_at,
                    _ => return None,
                };
                if now < expires_at {
                    return None;
                }
                Some(if j.requeue_count >= max_requeues {
                    ManagementEvent::Exhausted {
                        job_id: j.id.clone(),
                        evidence: Evidence::error(
                            format!("{LEASE_EXHAUSTED} after {} requeues", j.requeue_count),
                            (&j.plugin_name, "-"),
                            now,
                        ),
                        at: now,
                    }
                } else {
                    ManagementEvent::Requeued { job_id: j.id.clone(), requeue_count: j.requeue_count + 1, at: now }
                })
            })
            .collect()
    }

    pub fn apply(&mut self, event: &ManagementEvent) {
        self.mutations += 1;
        match event {
            ManagementEvent::Enqueued { job } => {
                self.next_seq = self.next_seq.max(job.enqueue_seq + 1);
                self.queues
                    .entry(job.system_id.clone())
                    .or_default()
                    .insert((job.enqueue_seq, job.id.clone()));
                self.jobs.insert(job.id.clone(), job.clone());
            }
            ManagementEvent::Claimed { job_id, runner, expires_at, directive, .. } => {
                if let Some(j) = self.jobs.get_mut(job_id) {
                    if let Some(q) = self.queues.get_mut(&j.system_id) {
                        q.remove(&(j.enqueue_seq, j.id.clone()));
                    }
                    if let Some(d) = directive {
                        j.plugin_name = d.plugin_name.clone();
                        j.plugin_version_req = d.plugin_version_req.clone();
                        j.plugin_config = d.plugin_config.clone();
                    }
                    j.state = JobState::Claimed { runner: runner.clone(), expires_at: *expires_at };
                }
            }
            ManagementEvent::Progressed { job_id, step, expires_at, .. } => {
                if let Some(j) = self.jobs.get_mut(job_id) {
                    if let Some(runner) = j.state.holder().cloned() {
                        j.state = JobState::InProgress { runner, step: *step, expires_at: *expires_at };
                    }
                }
            }
            ManagementEvent::LeaseRenewed { job_id, expires_at: new_expiry, .. } => {
                if let Some(j) = self.jobs.get_mut(job_id) {
                    match &mut j.state {
                        JobState::Claimed { expires_at, .. } | JobState::InProgress { expires_at, .. } => {
                            *expires_at = *new_expiry;
                        }
                        _ => {}
                    }
                }
            }
            ManagementEvent::Completed { job_id, evidence, .. } | ManagementEvent::Exhausted { job_id, evidence, .. } => {
                if let Some(j) = self.jobs.get_mut(job_id) {
                    j.state = match evidence.kind {
                        EvidenceKind::Error => JobState::Failed { evidence: evidence.clone() },
                        EvidenceKind::Success | EvidenceKind::NoDataFound => JobState::Done { evidence: evidence.clone() },
                    };
                }
            }
            ManagementEvent::Requeued { job_id, requeue_count, .. } => {
                if let Some(j) = self.jobs.get_mut(job_id) {
                    j.state = JobState::Queued;
                    j.requeue_count = *requeue_count;
                    self.queues
                        .entry(j.system_id.clone())
                        .or_default()
                        .insert((j.enqueue_seq, j.id.clone()));
                }
            }
        }
    }
}

/// Per-system runner tokens and the opaque target credentials handed out with jobs.
#[derive(Clone, Debug, Default)]
pub struct Vault {
    entries: BTreeMap<SystemId, RunnerCredential>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunnerCredential {
    pub runner_token: String,
    pub credential_ref: String,
}

impl Vault {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, system: SystemId, cred: RunnerCredential) {
        self.entries.insert(system, cred);
    }

    pub fn authorize(&self, system: &SystemId, token: &str) -> Result<()> {
        match self.entries.get(system) {
            Some(c) if c.runner_token == token => Ok(()),
            _ => Err(Error::Unauthorized(system.to_string())),
        }
    }

    pub fn credential_ref(&self, system: &SystemId) -> String {
        self.entries
            .get(system)
            .map(|c| c.credential_ref.clone())
            .unwrap_or_default()
    }
}
