//! HTTP/JSON routes.
//!
//! Every route except `/health` needs `Authorization: Bearer <token>`. Reads
//! are projections of the service state under the reader lock; writes go
//! through [`AppState::mutate`].

use axum::extract::{FromRequestParts, Path, Query, State};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{async_trait, Json, Router};
use erasure_core::executor;
use erasure_core::ids::{JobId, PurposeId, RequestId, RunnerId, SubTaskId, SystemId};
use erasure_core::plugins::{BehaviorSpec, PluginDescriptor, VersionConstraint};
use erasure_core::policy::{ExemptionCategory, ExemptionClaim};
use erasure_core::registry::{DeletionDirective, RegistryEntity, RegistrySeed};
use erasure_core::report::generate_report;
use erasure_core::time::ClockMode;
use erasure_core::workflow::{ErasureRequest, Evidence, Origin, RequestScope, RequestState, ReviewDecision, SubTask, SubjectRef};
use erasure_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::auth::{bearer, Principal, RoleKind};
use crate::state::AppState;

const READERS: &[RoleKind] = &[RoleKind::Operator, RoleKind::Reviewer, RoleKind::Auditor];
const AUDITORS: &[RoleKind] = &[RoleKind::Operator, RoleKind::Auditor];
const OPERATOR: &[RoleKind] = &[RoleKind::Operator];
const REVIEWER: &[RoleKind] = &[RoleKind::Reviewer];
const RUNNER: &[RoleKind] = &[RoleKind::Runner];

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError { status, code: code.into(), message: message.into() }
    }
}

pub fn status_for(e: &Error) -> StatusCode {
    use Error::*;
    match e {
        Unauthorized(_) => StatusCode::FORBIDDEN,
        UnknownSystem(_) | UnknownRequest(_) | UnknownSubTask(_) | UnknownJob(_) | NoMatchingVersion { .. } => {
            StatusCode::NOT_FOUND
        }
        DuplicateId { .. } | DuplicateVersion { .. } | DuplicateJob(_) | InvalidState(_) | InvalidTransition(_)
        | SelfApproval(_) | DuplicateReviewer(_) | AlreadyExpanded(_) | NotClaimHolder { .. } | StaleStep { .. }
        | InactiveSystem(_) => StatusCode::CONFLICT,
        UnknownReference { .. } | UnknownPurpose(_) | Malformed(_) | MalformedEvidence(_) | TimestampOrder { .. }
        | ChecksumMismatch { .. } | MalformedSpec(_) | ScenarioInvalid(_) | RangeOutOfBounds { .. } => {
            StatusCode::UNPROCESSABLE_ENTITY
        }
        ChainMismatch { .. } | Io(_) | CorruptLog { .. } | Crashed(_) | InvariantViolation(_) => {
            StatusCode::INTERNAL_SERVER_ERROR
        }
        RegistryUnavailable(_) | ManagementUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError { status: status_for(&e), code: e.code().into(), message: e.to_string() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.code, "message": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// The authenticated principal of a request.
pub struct Caller(pub Principal);

#[async_trait]
impl FromRequestParts<AppState> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        let token = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(bearer)
            .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "Unauthenticated", "missing bearer token"))?;
        state
            .directory
            .lookup(token)
            .cloned()
            .map(Caller)
            .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "Unauthenticated", "unknown token"))
    }
}

impl Caller {
    fn require(&self, roles: &[RoleKind]) -> ApiResult<()> {
        if self.0.is(roles) {
            Ok(())
        } else {
            Err(ApiError::new(
                StatusCode::FORBIDDEN,
                "Forbidden",
                format!("{} ({:?}) may not call this endpoint", self.0.identity, self.0.role),
            ))
        }
    }

    fn identity(&self) -> &str {
        &self.0.identity
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/metrics", get(metrics))
        .route("/requests", post(submit).get(list_requests))
        .route("/requests/:id", get(get_request))
        .route("/requests/:id/review", post(review))
        .route("/requests/:id/exemptions", post(exemption))
        .route("/requests/:id/close", post(close))
        .route("/requests/:id/report", get(report))
        .route("/subtasks/:id", get(get_subtask))
        .route("/subtasks/:id/retry", post(retry))
        .route("/registry/entities", post(register))
        .route("/registry/seed", post(seed))
        .route("/registry/:kind", get(list_registry))
        .route("/registry/systems/:id", get(get_system))
        .route("/registry/systems/:id/directive", put(update_directive))
        .route("/registry/systems/:id/activation", post(set_activation))
        .route("/plugins", get(list_plugins).post(publish_plugin))
        .route("/plugins/:name", get(plugin_versions))
        .route("/plugins/:name/resolve", get(resolve_plugin))
        .route("/runner/claim", post(claim))
        .route("/runner/progress", post(progress))
        .route("/runner/renew", post(renew))
        .route("/runner/complete", post(complete))
        .route("/audit/events", get(audit_events))
        .route("/audit/verify", get(audit_verify))
        .route("/clock/advance", post(advance_clock))
        .with_state(state)
}

// health and metrics

async fn health(State(app): State<AppState>) -> Json<Value> {
    let svc = app.read();
    Json(json!({
        "status": "ready",
        "log_entries": svc.store().len(),
        "tail_hash": svc.store().tail_hash(),
        "clock": app.clock.mode(),
        "now": app.now(),
    }))
}

async fn metrics(State(app): State<AppState>, caller: Caller) -> ApiResult<Json<executor::Metrics>> {
    caller.require(READERS)?;
    Ok(Json(executor::metrics(&app.read())))
}

// requests

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitBody {
    pub subject: SubjectRef,
    #[serde(default)]
    pub purpose_filter: Option<PurposeId>,
    /// Entered by hand on behalf of a data subject rather than via an upstream system.
    #[serde(default)]
    pub manual: bool,
}

async fn submit(
    State(app): State<AppState>,
    caller: Caller,
    Json(body): Json<SubmitBody>,
) -> ApiResult<(StatusCode, Json<ErasureRequest>)> {
    caller.require(OPERATOR)?;
    let who = caller.identity().to_string();
    let origin = if body.manual { Origin::Manual(who) } else { Origin::Api(who) };
    let scope = RequestScope { subject: body.subject, purpose_filter: body.purpose_filter };
    let req = app.mutate(|svc, now| svc.submit_request(scope, origin, now))?;
    Ok((StatusCode::CREATED, Json(req)))
}

#[derive(Debug, Default, Deserialize)]
pub struct ListQuery {
    pub state: Option<RequestState>,
    pub overdue: Option<bool>,
}

async fn list_requests(
    State(app): State<AppState>,
    caller: Caller,
    Query(q): Query<ListQuery>,
) -> ApiResult<Json<Vec<ErasureRequest>>> {
    caller.require(READERS)?;
    let svc = app.read();
    let list = svc
        .workflow()
        .requests()
        .filter(|r| q.state.map_or(true, |s| r.state == s))
        .filter(|r| q.overdue.map_or(true, |o| r.overdue == o))
        .cloned()
        .collect();
    Ok(Json(list))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Progress {
    /// Active sub-tasks in a terminal state.
    pub closed: usize,
    pub total: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RequestDetail {
    pub request: ErasureRequest,
    /// Every attempt, superseded ones included.
    pub subtasks: Vec<SubTask>,
    pub progress: Progress,
}

async fn get_request(
    State(app): State<AppState>,
    caller: Caller,
    Path(id): Path<RequestId>,
) -> ApiResult<Json<RequestDetail>> {
    caller.require(READERS)?;
    let svc = app.read();
    let wf = svc.workflow();
    let request = wf.request(&id)?;
    let active = wf.active_subtasks_of(request);
    let progress = Progress { closed: active.iter().filter(|s| s.state.is_terminal()).count(), total: active.len() };
    Ok(Json(RequestDetail {
        request: request.clone(),
        subtasks: wf.subtasks_of(request).into_iter().cloned().collect(),
        progress,
    }))
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewBody {
    pub decision: ReviewDecision,
    #[serde(default)]
    pub comment: String,
}

async fn review(
    State(app): State<AppState>,
    caller: Caller,
    Path(id): Path<RequestId>,
    Json(body): Json<ReviewBody>,
) -> ApiResult<Json<ErasureRequest>> {
    caller.require(REVIEWER)?;
    let req = app.mutate(|svc, now| svc.review(&id, caller.identity(), body.decision, &body.comment, now))?;
    Ok(Json(req))
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExemptionBody {
    pub category: ExemptionCategory,
    pub justification: String,
}

async fn exemption(
    State(app): State<AppState>,
    caller: Caller,
    Path(id): Path<RequestId>,
    Json(body): Json<ExemptionBody>,
) -> ApiResult<Json<ErasureRequest>> {
    caller.require(REVIEWER)?;
    let req = app.mutate(|svc, now| {
        let claim = ExemptionClaim {
            category: body.category,
            justification: body.justification,
            claimed_by: caller.identity().to_string(),
            timestamp: now,
        };
        svc.record_exemption(caller.identity(), &id, claim, now)?;
        svc.workflow().request(&id).cloned()
    })?;
    Ok(Json(req))
}

async fn close(State(app): State<AppState>, caller: Caller, Path(id): Path<RequestId>) -> ApiResult<Json<ErasureRequest>> {
    caller.require(OPERATOR)?;
    let req = app.mutate(|svc, now| {
        if svc.try_close_request(caller.identity(), &id, now)?.is_none() {
            return Err(Error::InvalidState(format!("request {id} still has open sub-tasks")));
        }
        svc.workflow().request(&id).cloned()
    })?;
    Ok(Json(req))
}

#[derive(Debug, Default, Deserialize)]
pub struct ReportQuery {
    pub format: Option<String>,
}

async fn report(
    State(app): State<AppState>,
    caller: Caller,
    Path(id): Path<RequestId>,
    Query(q): Query<ReportQuery>,
) -> ApiResult<Response> {
    caller.require(READERS)?;
    let report = generate_report(app.read().state(), &id)?;
    Ok(match q.format.as_deref() {
        Some("text") => ([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], report.to_text()).into_response(),
        None | Some("json") => Json(report).into_response(),
        Some(other) => {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, "Malformed", format!("unknown format '{other}'")))
        }
    })
}

async fn get_subtask(State(app): State<AppState>, caller: Caller, Path(id): Path<SubTaskId>) -> ApiResult<Json<SubTask>> {
    caller.require(READERS)?;
    Ok(Json(app.read().workflow().subtask(&id)?.clone()))
}

async fn retry(State(app): State<AppState>, caller: Caller, Path(id): Path<SubTaskId>) -> ApiResult<Json<SubTask>> {
    caller.require(OPERATOR)?;
    Ok(Json(app.mutate(|svc, now| svc.retry_subtask(caller.identity(), &id, now))?))
}

// registry

async fn register(
    State(app): State<AppState>,
    caller: Caller,
    Json(entity): Json<RegistryEntity>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    caller.require(OPERATOR)?;
    let id = app.mutate(|svc, now| svc.register_entity(caller.identity(), entity, now))?;
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))))
}

async fn seed(State(app): State<AppState>, caller: Caller, Json(seed): Json<RegistrySeed>) -> ApiResult<Json<Value>> {
    caller.require(OPERATOR)?;
    let ids = app.mutate(|svc, now| svc.seed_registry(caller.identity(), &seed, now))?;
    Ok(Json(json!({ "registered": ids })))
}

async fn list_registry(State(app): State<AppState>, caller: Caller, Path(kind): Path<String>) -> ApiResult<Json<Value>> {
    caller.require(READERS)?;
    let svc = app.read();
    let r = svc.registry();
    let list = match kind.as_str() {
        "systems" => json!(r.systems().collect::<Vec<_>>()),
        "purposes" => json!(r.purposes().collect::<Vec<_>>()),
        "data-categories" => json!(r.data_categories().collect::<Vec<_>>()),
        "system-types" => json!(r.system_types().collect::<Vec<_>>()),
        "retention-policies" => json!(r.retention_policies().collect::<Vec<_>>()),
        _ => return Err(ApiError::new(StatusCode::NOT_FOUND, "NotFound", format!("no registry collection '{kind}'"))),
    };
    Ok(Json(list))
}

async fn get_system(State(app): State<AppState>, caller: Caller, Path(id): Path<SystemId>) -> ApiResult<Json<Value>> {
    caller.require(READERS)?;
    let svc = app.read();
    let sys = svc.registry().system(&id).ok_or_else(|| Error::UnknownSystem(id.to_string()))?;
    Ok(Json(json!(sys)))
}

async fn update_directive(
    State(app): State<AppState>,
    caller: Caller,
    Path(id): Path<SystemId>,
    Json(directive): Json<DeletionDirective>,
) -> ApiResult<Json<Value>> {
    caller.require(OPERATOR)?;
    let version = app.mutate(|svc, now| svc.update_directive(caller.identity(), &id, directive, now))?;
    Ok(Json(json!({ "version": version })))
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationBody {
    pub active: bool,
}

async fn set_activation(
    State(app): State<AppState>,
    caller: Caller,
    Path(id): Path<SystemId>,
    Json(body): Json<ActivationBody>,
) -> ApiResult<Json<Value>> {
    caller.require(OPERATOR)?;
    let version = app.mutate(|svc, now| svc.set_active(caller.identity(), &id, body.active, now))?;
    Ok(Json(json!({ "version": version })))
}

// plugins

async fn list_plugins(State(app): State<AppState>, caller: Caller) -> ApiResult<Json<Vec<PluginDescriptor>>> {
    caller.require(READERS)?;
    Ok(Json(app.read().plugins().all().cloned().collect()))
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PublishBody {
    pub name: String,
    pub version: String,
    pub behavior_spec: BehaviorSpec,
    /// When given, must match the artifact.
    #[serde(default)]
    pub checksum: Option<String>,
}

async fn publish_plugin(
    State(app): State<AppState>,
    caller: Caller,
    Json(body): Json<PublishBody>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    caller.require(OPERATOR)?;
    let version = app.mutate(|svc, now| {
        let mut d: PluginDescriptor = serde_json::from_value(json!({
            "name": body.name,
            "version": body.version,
            "checksum": "",
            "behavior_spec": body.behavior_spec,
            "published_at": now,
        }))
        .map_err(|e| Error::Malformed(e.to_string()))?;
        d.checksum = body.checksum.clone().unwrap_or_else(|| d.artifact_checksum());
        svc.publish_plugin(caller.identity(), d, now)
    })?;
    Ok((StatusCode::CREATED, Json(json!({ "name": body.name, "version": version }))))
}

async fn plugin_versions(
    State(app): State<AppState>,
    caller: Caller,
    Path(name): Path<String>,
) -> ApiResult<Json<Vec<PluginDescriptor>>> {
    caller.require(READERS)?;
    Ok(Json(app.read().plugins().versions(&name).into_iter().cloned().collect()))
}

#[derive(Debug, Deserialize)]
pub struct ResolveQuery {
    pub constraint: String,
}

async fn resolve_plugin(
    State(app): State<AppState>,
    caller: Caller,
    Path(name): Path<String>,
    Query(q): Query<ResolveQuery>,
) -> ApiResult<Json<PluginDescriptor>> {
    caller.require(&[RoleKind::Operator, RoleKind::Reviewer, RoleKind::Auditor, RoleKind::Runner])?;
    let req: VersionConstraint = q.constraint.parse()?;
    Ok(Json(app.read().resolve_plugin(&name, &req)?.clone()))
}

// runner protocol

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ClaimBody {
    pub system_id: SystemId,
}

#[derive(Debug, Deserialize, Serialize)]
pub struct ClaimResponse {
    pub job: Option<erasure_core::management::DeletionJob>,
}

async fn claim(State(app): State<AppState>, caller: Caller, Json(body): Json<ClaimBody>) -> ApiResult<Json<ClaimResponse>> {
    caller.require(RUNNER)?;
    if !caller.0.runs(&body.system_id) {
        return Err(Error::Unauthorized(body.system_id.to_string()).into());
    }
    let runner = RunnerId::from(caller.identity());
    let job = app.mutate(|svc, now| svc.claim_next(&runner, &body.system_id, &caller.0.token, now))?;
    Ok(Json(ClaimResponse { job }))
}

/// Rejects callers whose token is not bound to the job's system.
fn check_job_system(svc: &erasure_core::service::Service, caller: &Caller, job: &JobId) -> erasure_core::Result<()> {
    let system = &svc.management().job(job)?.system_id;
    if caller.0.runs(system) {
        Ok(())
    } else {
        Err(Error::Unauthorized(system.to_string()))
    }
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ProgressBody {
    pub job_id: JobId,
    pub step: u32,
}

async fn progress(
    State(app): State<AppState>,
    caller: Caller,
    Json(body): Json<ProgressBody>,
) -> ApiResult<Json<erasure_core::management::DeletionJob>> {
    caller.require(RUNNER)?;
    let runner = RunnerId::from(caller.identity());
    let job = app.mutate(|svc, now| {
        check_job_system(svc, &caller, &body.job_id)?;
        svc.report_progress(&body.job_id, &runner, body.step, now)
    })?;
    Ok(Json(job))
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RenewBody {
    pub job_id: JobId,
}

async fn renew(
    State(app): State<AppState>,
    caller: Caller,
    Json(body): Json<RenewBody>,
) -> ApiResult<Json<erasure_core::management::DeletionJob>> {
    caller.require(RUNNER)?;
    let runner = RunnerId::from(caller.identity());
    let job = app.mutate(|svc, now| {
        check_job_system(svc, &caller, &body.job_id)?;
        svc.renew_claim(&body.job_id, &runner, now)
    })?;
    Ok(Json(job))
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CompleteBody {
    pub job_id: JobId,
    pub evidence: Evidence,
}

async fn complete(
    State(app): State<AppState>,
    caller: Caller,
    Json(body): Json<CompleteBody>,
) -> ApiResult<Json<erasure_core::management::DeletionJob>> {
    caller.require(RUNNER)?;
    let runner = RunnerId::from(caller.identity());
    let job = app.mutate(|svc, now| {
        check_job_system(svc, &caller, &body.job_id)?;
        svc.report_completion(&body.job_id, &runner, body.evidence, now)
    })?;
    Ok(Json(job))
}

// audit

#[derive(Debug, Deserialize)]
pub struct EventsQuery {
    #[serde(default)]
    pub from: u64,
    pub limit: Option<usize>,
    pub stream: Option<String>,
}

const MAX_EVENTS: usize = 1000;

async fn audit_events(State(app): State<AppState>, caller: Caller, Query(q): Query<EventsQuery>) -> ApiResult<Json<Value>> {
    caller.require(AUDITORS)?;
    let svc = app.read();
    let limit = q.limit.unwrap_or(100).min(MAX_EVENTS);
    let entries: Vec<_> = svc
        .log()
        .iter()
        .skip(q.from as usize)
        .filter(|e| q.stream.as_deref().map_or(true, |s| e.record.stream == s))
        .take(limit)
        .collect();
    Ok(Json(json!(entries)))
}

#[derive(Debug, Deserialize)]
pub struct VerifyQuery {
    pub from: Option<u64>,
    pub to: Option<u64>,
}

async fn audit_verify(
    State(app): State<AppState>,
    caller: Caller,
    Query(q): Query<VerifyQuery>,
) -> ApiResult<Json<erasure_core::store::VerificationReport>> {
    caller.require(AUDITORS)?;
    let svc = app.read();
    let store = svc.store();
    Ok(Json(store.verify_chain(q.from.unwrap_or(0), q.to.unwrap_or(store.len()))?))
}

// virtual clock

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AdvanceBody {
    pub secs: u64,
}

/// Moves the virtual clock, then runs one executor pass at the new time.
async fn advance_clock(
    State(app): State<AppState>,
    caller: Caller,
    Json(body): Json<AdvanceBody>,
) -> ApiResult<Json<crate::state::PassSummary>> {
    caller.require(OPERATOR)?;
    let crate::state::GatewayClock::Virtual(clock) = &app.clock else {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "ClockNotVirtual",
            format!("clock mode is {:?}", ClockMode::RealTime),
        ));
    };
    clock.advance(body.secs);
    Ok(Json(app.executor_pass()?))
}
