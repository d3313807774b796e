//! HTTP front end for tuning sessions.
//!
//! Routes:
//!
//! ```text
//! POST /sessions                        campaign config -> session id
//! GET  /sessions                        known session ids
//! GET  /sessions/{id}                   version, iteration, pending count
//! GET  /sessions/{id}/queries           open queries with rollout payloads
//! POST /sessions/{id}/feedback          one verdict for one query
//! GET  /sessions/{id}/rollouts/{rid}    a stored rollout
//! GET  /sessions/{id}/report            believed best and per-iteration history
//! ```

use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use prefcbf::session::{FeedbackSubmission, SessionStore};
use prefcbf::Error;
use serde::Serialize;

pub const DATA_DIR_ENV: &str = "PREFCBF_DATA_DIR";

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<SessionStore>,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
    kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<String>,
}

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self.0 {
            Error::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
            Error::UnknownQuery(_) => (StatusCode::NOT_FOUND, "unknown_query"),
            Error::UnknownRollout(_) => (StatusCode::NOT_FOUND, "unknown_rollout"),
            Error::DuplicateSubmission(_) => (StatusCode::CONFLICT, "duplicate_submission"),
            Error::StaleVersion { .. } => (StatusCode::CONFLICT, "stale_version"),
            Error::InvalidConfig { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_config"),
            Error::MalformedSubmission(_) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "malformed_submission")
            }
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        if status.is_server_error() {
            tracing::error!(error = %self.0, "request failed");
        }
        let path = match &self.0 {
            Error::InvalidConfig { path, .. } => Some(path.clone()),
            _ => None,
        };
        let body = ErrorBody {
            error: self.0.to_string(),
            kind,
            path,
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs store calls off the async executor; rollouts and learner steps are CPU bound.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> prefcbf::Result<T> + Send + 'static,
) -> ApiResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError),
        Err(e) => Err(ApiError(Error::Provider(format!("worker panicked: {e}")))),
    }
}

pub fn router(store: Arc<SessionStore>) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(session_summary))
        .route("/sessions/{id}/queries", get(next_queries))
        .route("/sessions/{id}/feedback", post(submit_feedback))
        .route("/sessions/{id}/rollouts/{rid}", get(get_rollout))
        .route("/sessions/{id}/report", get(report))
        .with_state(AppState { store })
}

async fn create_session(State(app): State<AppState>, body: String) -> ApiResult<Response> {
    let store = app.store.clone();
    let id = blocking(move || store.create_json(&body)).await?;
    let store = app.store.clone();
    let summary = {
        let id = id.clone();
        blocking(move || store.summary(&id)).await?
    };
    tracing::info!(session = %id, "created over http");
    Ok((StatusCode::CREATED, Json(summary)).into_response())
}

async fn list_sessions(State(app): State<AppState>) -> ApiResult<Response> {
    let store = app.store.clone();
    let ids = blocking(move || store.list()).await?;
    Ok(Json(serde_json::json!({ "sessions": ids })).into_response())
}

async fn session_summary(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let store = app.store.clone();
    Ok(Json(blocking(move || store.summary(&id)).await?).into_response())
}

async fn next_queries(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let store = app.store.clone();
    Ok(Json(blocking(move || store.next_queries(&id)).await?).into_response())
}

async fn submit_feedback(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: String,
) -> ApiResult<Response> {
    let de = &mut serde_json::Deserializer::from_str(&body);
    let sub: FeedbackSubmission = serde_path_to_error::deserialize(de)
        .map_err(|e| Error::MalformedSubmission(format!("{}: {}", e.path(), e.inner())))?;
    let store = app.store.clone();
    // the store serializes submissions per session
    Ok(Json(blocking(move || store.submit(&id, &sub)).await?).into_response())
}

async fn get_rollout(
    State(app): State<AppState>,
    Path((id, rid)): Path<(String, String)>,
) -> ApiResult<Response> {
    let store = app.store.clone();
    Ok(Json(blocking(move || store.rollout(&id, &rid)).await?).into_response())
}

async fn report(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let store = app.store.clone();
    Ok(Json(blocking(move || store.report(&id)).await?).into_response())
}
