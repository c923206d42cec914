//! HTTP + JSON consultation service.
//!
//! Routes:
//! - `POST /api/sessions` with `{"self_reports": [ids], "context": {...}?}`
//! - `POST /api/sessions/{id}/answer` with `{"answer": "positive" | "negative" | "cant_say"}`
//! - `GET /api/sessions/{id}`
//! - `GET /api/findings`
//! - `GET /api/health`
//!
//! Errors are `{"code": ..., "message": ...}` with a matching status. An
//! optional static directory is served at `/`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sympdx_core::patient_sim::PatientContext;
use sympdx_core::session::{Answer, SessionError, SessionSnapshot, SessionStore, StepView};
use tower_http::services::ServeDir;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.to_string(),
                message: message.into(),
            },
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let (status, code) = match &e {
            SessionError::EmptySelfReports => (StatusCode::BAD_REQUEST, "empty_self_reports"),
            SessionError::UnknownFinding(_) => (StatusCode::BAD_REQUEST, "unknown_finding"),
            SessionError::BadContext(_) => (StatusCode::BAD_REQUEST, "bad_context"),
            SessionError::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
            SessionError::NotAwaiting => (StatusCode::CONFLICT, "not_awaiting"),
            SessionError::AlreadyDiagnosed => (StatusCode::GONE, "already_diagnosed"),
            SessionError::NoModel => (StatusCode::SERVICE_UNAVAILABLE, "no_model"),
            SessionError::Model(_) => (StatusCode::INTERNAL_SERVER_ERROR, "model_error"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    pub self_reports: Vec<usize>,
    #[serde(default)]
    pub context: Option<PatientContext>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub first_inquiry: Option<usize>,
    #[serde(flatten)]
    pub view: StepView,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerRequest {
    pub answer: Answer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub model_loaded: bool,
    pub kb_hash: Option<String>,
    pub n_findings: Option<usize>,
    pub n_diseases: Option<usize>,
    pub sessions: usize,
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

async fn create_session(State(store): State<Arc<SessionStore>>, body: Bytes) -> ApiResult<CreateSessionResponse> {
    let req: CreateSessionRequest = parse_body(&body)?;
    let view = store.create(&req.self_reports, req.context)?;
    Ok(Json(CreateSessionResponse {
        first_inquiry: view.next_inquiry.as_ref().map(|f| f.id),
        view,
    }))
}

async fn submit_answer(
    State(store): State<Arc<SessionStore>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<StepView> {
    let req: AnswerRequest = parse_body(&body)?;
    Ok(Json(store.answer(&id, req.answer)?))
}

async fn get_session(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> ApiResult<SessionSnapshot> {
    Ok(Json(store.get(&id)?))
}

async fn findings(State(store): State<Arc<SessionStore>>) -> Result<Response, ApiError> {
    let engine = store.engine().ok_or(SessionError::NoModel)?;
    Ok(Json(engine.findings()).into_response())
}

async fn health(State(store): State<Arc<SessionStore>>) -> Json<HealthResponse> {
    let engine = store.engine();
    Json(HealthResponse {
        status: "ok".into(),
        model_loaded: engine.is_some(),
        kb_hash: engine.as_ref().map(|e| e.checkpoint().kb_hash.clone()),
        n_findings: engine.as_ref().map(|e| e.kb().n_findings()),
        n_diseases: engine.as_ref().map(|e| e.kb().n_diseases()),
        sessions: store.len(),
    })
}

/// Builds the application. `static_dir`, if given, is served at `/` for
/// every path the API does not claim.
pub fn router(store: Arc<SessionStore>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/answer", post(submit_answer))
        .route("/api/findings", get(findings))
        .route("/api/health", get(health))
        .with_state(store);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Binds `addr` and serves until Ctrl-C. Idle sessions are purged once a
/// minute.
pub async fn serve(store: Arc<SessionStore>, addr: SocketAddr, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    let sweeper = store.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            let purged = sweeper.purge_expired();
            if purged > 0 {
                log::info!("expired {purged} idle sessions");
            }
        }
    });
    axum::serve(listener, router(store, static_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
