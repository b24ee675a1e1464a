//! HTTP front of the session store. All payloads are JSON with a `version`
//! field; errors come back as `{"error": ..., "kind": ...}`.

use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use maskprop::engine::checkpoint::RunCheckpoint;
use maskprop::service::{Answer, GoldQuestion, SessionSpec, SessionStore, StoreOptions, PAYLOAD_VERSION};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use crate::args::ServeArgs;
use crate::error::{CliError, CliResult};

#[derive(Debug, Deserialize)]
pub struct CreateSessionRequest {
    pub session_id: String,
    pub checkpoint: RunCheckpoint,
    #[serde(default)]
    pub gold: Vec<GoldQuestion>,
    #[serde(default)]
    pub gold_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub accuracy_threshold: Option<f64>,
    #[serde(default)]
    pub min_gold: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub version: u32,
    pub session_id: String,
}

#[derive(Debug, Deserialize)]
pub struct AnswerRequest {
    pub token: String,
    pub label: Label,
    #[serde(default)]
    pub response_ms: Option<u64>,
    #[serde(default = "anonymous")]
    pub annotator_id: String,
}

fn anonymous() -> String {
    "anonymous".into()
}

/// Accepts `true`/`false` or `1`/`0`.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Bool(bool),
    Int(u8),
}

impl Label {
    fn value(&self) -> Option<bool> {
        match self {
            Label::Bool(b) => Some(*b),
            Label::Int(0) => Some(false),
            Label::Int(1) => Some(true),
            Label::Int(_) => None,
        }
    }
}

pub struct ApiError(maskprop::Error);

impl From<maskprop::Error> for ApiError {
    fn from(e: maskprop::Error) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        use maskprop::Error as E;
        let (status, kind) = match &self.0 {
            E::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
            E::UnknownToken(_) => (StatusCode::NOT_FOUND, "unknown_token"),
            E::SessionExists(_) => (StatusCode::CONFLICT, "session_exists"),
            E::DuplicateAnswer(_) => (StatusCode::CONFLICT, "duplicate_answer"),
            e if e.is_data_error() => (StatusCode::BAD_REQUEST, "invalid"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        let body = json!({ "version": PAYLOAD_VERSION, "error": self.0.to_string(), "kind": kind });
        (status, Json(body)).into_response()
    }
}

type Shared = Arc<SessionStore>;

/// Store calls sync the log to disk, so they run off the async workers.
async fn blocking<T, F>(store: Shared, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&SessionStore) -> maskprop::Result<T> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&store))
        .await
        .map_err(|e| ApiError(maskprop::Error::Input(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

async fn create_session(
    State(store): State<Shared>,
    Json(req): Json<CreateSessionRequest>,
) -> Result<(StatusCode, Json<CreateSessionResponse>), ApiError> {
    let mut spec = SessionSpec::new(req.session_id, req.gold, req.gold_rate, req.seed);
    if let Some(t) = req.accuracy_threshold {
        spec.accuracy_threshold = t;
    }
    if let Some(m) = req.min_gold {
        spec.min_gold = m;
    }
    let session_id = blocking(store, move |s| s.create_session(spec, req.checkpoint)).await?;
    Ok((StatusCode::CREATED, Json(CreateSessionResponse { version: PAYLOAD_VERSION, session_id })))
}

async fn next_question(State(store): State<Shared>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(blocking(store, move |s| s.next_question(&id)).await?))
}

async fn submit_answer(
    State(store): State<Shared>,
    Path(id): Path<String>,
    Json(req): Json<AnswerRequest>,
) -> Result<impl IntoResponse, ApiError> {
    let label = req
        .label
        .value()
        .ok_or_else(|| ApiError(maskprop::Error::Input("label must be 0, 1, true or false".into())))?;
    let answer = Answer { token: req.token, label, response_ms: req.response_ms, annotator_id: req.annotator_id };
    Ok(Json(blocking(store, move |s| s.submit_answer(&id, answer)).await?))
}

async fn progress(State(store): State<Shared>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(blocking(store, move |s| s.progress(&id)).await?))
}

async fn export(State(store): State<Shared>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(blocking(store, move |s| s.export_labels(&id)).await?))
}

pub fn router(store: Shared, images: Option<&std::path::Path>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/next", get(next_question))
        .route("/sessions/{id}/answers", post(submit_answer))
        .route("/sessions/{id}/progress", get(progress))
        .route("/sessions/{id}/export", get(export))
        .with_state(store);
    match images {
        Some(root) => api.nest_service("/images", ServeDir::new(root)),
        None => api,
    }
}

pub fn serve_blocking(args: &ServeArgs) -> CliResult<()> {
    let store = Arc::new(SessionStore::open(&args.store, StoreOptions::default())?);
    let app = router(store, args.images.as_deref());
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Internal(e.to_string()))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&args.addr)
            .await
            .map_err(|e| CliError::Usage(format!("cannot bind {}: {e}", args.addr)))?;
        eprintln!("serving {} on http://{}", args.store.display(), args.addr);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Internal(e.to_string()))
    })
}
