//! HTTP+JSON API.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use serde::Deserialize;
use serde_json::{json, Value};

use flowsmith_core::flow::{deserialize, serialize, validate, Provenance};
use flowsmith_core::harness::grade;
use flowsmith_core::intent::{advance, finalize, ConversationState, FormAnswer, IntentError, TurnInput};

use crate::jobs::{self, Shared};
use crate::workspace::{valid_id, Collection, Job, JobPhase, RunRecord, Session, SessionStatus};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    extra: Option<Value>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into(), extra: None }
    }

    fn not_found(what: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, format!("{what} not found"))
    }

    fn with(mut self, extra: Value) -> Self {
        self.extra = Some(extra);
        self
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        log::error!("workspace error: {e}");
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "workspace error")
    }
}

impl From<tokio::task::JoinError> for ApiError {
    fn from(e: tokio::task::JoinError) -> Self {
        log::error!("background task failed: {e}");
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal error")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"error": self.message});
        if let (Some(Value::Object(extra)), Value::Object(map)) = (self.extra, &mut body) {
            map.extend(extra);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone)]
pub struct AppState {
    shared: Arc<Shared>,
    /// Serializes read-modify-write of one session.
    session_locks: Arc<Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>>,
}

impl AppState {
    pub fn new(shared: Arc<Shared>) -> Self {
        AppState { shared, session_locks: Arc::default() }
    }

    fn session_lock(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.session_locks.lock().unwrap().entry(id.to_owned()).or_default().clone()
    }

    fn session(&self, id: &str) -> ApiResult<Session> {
        self.shared.ws.get(Collection::Sessions, id)?.ok_or_else(|| ApiError::not_found("session"))
    }
}

pub fn router(state: AppState, ui: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/generate", post(generate))
        .route("/jobs/{id}", get(get_job).delete(cancel_job))
        .route("/flows/{id}", get(get_flow).put(put_flow))
        .route("/flows/{id}/run", post(run_flow))
        .route("/flows/{id}/grade", get(grade_flow))
        .route("/runs/{id}", get(get_run))
        .with_state(state);
    match ui {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

fn new_id(prefix: &str) -> String {
    format!("{prefix}-{}", uuid::Uuid::new_v4().simple())
}

async fn create_session(State(st): State<AppState>) -> ApiResult<(StatusCode, Json<Session>)> {
    let id = new_id("s");
    let session = Session {
        id: id.clone(),
        state: ConversationState::new(&id),
        created_at: Utc::now(),
        status: SessionStatus::Chatting,
        flows: Vec::new(),
    };
    st.shared.ws.put(Collection::Sessions, &id, &session)?;
    Ok((StatusCode::CREATED, Json(session)))
}

async fn get_session(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Session>> {
    Ok(Json(st.session(&id)?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MessageBody {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    answers: Option<Vec<FormAnswer>>,
}

async fn post_message(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<MessageBody>,
) -> ApiResult<Json<Value>> {
    let input = match body {
        MessageBody { text: Some(t), answers: None } => TurnInput::Message(t),
        MessageBody { text: None, answers: Some(a) } => TurnInput::Form(a),
        _ => return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "send either text or answers")),
    };
    let lock = st.session_lock(&id);
    let _guard = lock.lock().await;
    let mut session = st.session(&id)?;
    if session.status == SessionStatus::Generating {
        return Err(ApiError::new(StatusCode::CONFLICT, "a generation is in progress for this session"));
    }
    let shared = st.shared.clone();
    let state = session.state.clone();
    let outcome = tokio::task::spawn_blocking(move || {
        let e = &shared.engine;
        advance(&state, input, &e.gateway, &e.bundle, &e.cfg)
    })
    .await?;
    let (next, turn) = outcome.map_err(|e| match e {
        IntentError::AgentUnavailable(_) => ApiError::new(StatusCode::BAD_GATEWAY, "the assistant could not be reached, try again"),
        other => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, other.to_string()),
    })?;
    session.state = next;
    st.shared.ws.put(Collection::Sessions, &id, &session)?;
    Ok(Json(serde_json::to_value(turn).expect("serializable")))
}

async fn generate(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<(StatusCode, Json<Job>)> {
    let lock = st.session_lock(&id);
    let _guard = lock.lock().await;
    let mut session = st.session(&id)?;
    if session.status == SessionStatus::Generating {
        return Err(ApiError::new(StatusCode::CONFLICT, "a generation is already in progress for this session"));
    }
    let intent = finalize(&session.state)
        .map_err(|_| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "the session has no user message yet"))?;
    let now = Utc::now();
    let job = Job {
        id: new_id("j"),
        session_id: id.clone(),
        phase: JobPhase::Planning,
        attempt: 1,
        result: None,
        plans: Vec::new(),
        review_exhausted: false,
        cancel_requested: false,
        created_at: now,
        updated_at: now,
    };
    st.shared.ws.put(Collection::Jobs, &job.id, &job)?;
    session.status = SessionStatus::Generating;
    st.shared.ws.put(Collection::Sessions, &id, &session)?;
    let shared = st.shared.clone();
    let background = job.clone();
    tokio::task::spawn_blocking(move || jobs::generate(&shared, background, intent));
    Ok((StatusCode::ACCEPTED, Json(job)))
}

async fn get_job(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Job>> {
    Ok(Json(st.shared.ws.get(Collection::Jobs, &id)?.ok_or_else(|| ApiError::not_found("job"))?))
}

/// Best-effort: the job keeps running to its next checkpoint, but its
/// result is discarded and the job ends as failed.
async fn cancel_job(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<(StatusCode, Json<Job>)> {
    let mut job: Job = st.shared.ws.get(Collection::Jobs, &id)?.ok_or_else(|| ApiError::not_found("job"))?;
    if job.phase.is_terminal() {
        return Err(ApiError::new(StatusCode::CONFLICT, "the job has already finished"));
    }
    st.shared.request_cancel(&id);
    job.cancel_requested = true;
    st.shared.ws.put(Collection::Jobs, &id, &job)?;
    Ok((StatusCode::ACCEPTED, Json(job)))
}

fn flow_response(flow: &flowsmith_core::flow::Flow) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], serialize(flow)).into_response()
}

fn load_flow(st: &AppState, id: &str) -> ApiResult<flowsmith_core::flow::Flow> {
    st.shared.ws.get_flow(id)?.ok_or_else(|| ApiError::not_found("flow"))
}

async fn get_flow(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(flow_response(&load_flow(&st, &id)?))
}

/// Replaces a flow with an edited document. The document may be invalid
/// (a flow mid-edit); running it is what requires validity.
async fn put_flow(State(st): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    if !valid_id(&id) {
        return Err(ApiError::not_found("flow"));
    }
    let flow = deserialize(&body).map_err(|e| {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.message.clone()).with(json!({"path": e.path}))
    })?;
    if flow.id() != id {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "document id does not match the URL"));
    }
    let flow = flow.with_provenance(Provenance::Edited);
    st.shared.ws.put_flow(&flow)?;
    Ok(flow_response(&flow))
}

async fn run_flow(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<(StatusCode, Json<RunRecord>)> {
    let flow = load_flow(&st, &id)?;
    let report = validate(&flow, &st.shared.engine.catalog);
    if !report.is_valid() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "the flow does not validate")
            .with(json!({"report": report})));
    }
    let record = RunRecord { id: new_id("r"), result: jobs::new_run(&flow) };
    st.shared.ws.put(Collection::Runs, &record.id, &record)?;
    let shared = st.shared.clone();
    let run_id = record.id.clone();
    tokio::task::spawn_blocking(move || jobs::execute(shared, run_id, flow));
    Ok((StatusCode::ACCEPTED, Json(record)))
}

async fn grade_flow(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let flow = load_flow(&st, &id)?;
    let shared = st.shared.clone();
    let report = tokio::task::spawn_blocking(move || grade(&flow, &shared.engine.catalog, &shared.engine.evaluators)).await?;
    Ok(Json(serde_json::to_value(report).expect("serializable")))
}

async fn get_run(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<RunRecord>> {
    Ok(Json(st.shared.ws.get(Collection::Runs, &id)?.ok_or_else(|| ApiError::not_found("run"))?))
}
