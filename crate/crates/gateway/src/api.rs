//! Study administration over HTTP, plus the `/ws` upgrade and static assets.
//!
//! | method | path | who |
//! |---|---|---|
//! | `POST` | `/api/sessions` | admin |
//! | `GET` | `/api/sessions` | admin |
//! | `GET` | `/api/sessions/{id}` | admin or the session's leader |
//! | `PATCH` | `/api/sessions/{id}/indicator` | admin or the session's leader |
//! | `GET` | `/api/sessions/{id}/export?format=csv\|xlsx` | admin or the session's leader |
//! | `POST` | `/api/sessions/{id}/close` | admin or the session's leader |
//!
//! Credentials travel as `Authorization: Bearer <token>`. Errors are JSON
//! objects `{"error": CODE, "detail": text}`.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State, WebSocketUpgrade};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use parley_core::{export_session, ExportFormat, SessionConfig, SessionId, TypingIndicatorPolicy};

use crate::hub::{Hub, HubError, ParticipantSpec, SessionHandle};
use crate::ws::serve_connection;

#[derive(Clone)]
pub struct AppState {
    pub hub: Arc<Hub>,
    pub admin_token: Arc<str>,
}

/// Body of `POST /api/sessions`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    pub config: SessionConfig,
    pub roster: Vec<ParticipantSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApiErrorBody {
    pub error: String,
    pub detail: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    detail: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, detail: impl Into<String>) -> Self {
        Self {
            status,
            code,
            detail: detail.into(),
        }
    }

    fn unauthorized() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "UNAUTHORIZED", "missing or invalid bearer token")
    }

    fn unknown(id: &SessionId) -> Self {
        Self::new(StatusCode::NOT_FOUND, "UNKNOWN_SESSION", format!("unknown session {id}"))
    }
}

impl From<HubError> for ApiError {
    fn from(e: HubError) -> Self {
        let detail = e.to_string();
        match e {
            HubError::Exists(_) => Self::new(StatusCode::CONFLICT, "SESSION_EXISTS", detail),
            HubError::Invalid(_) => Self::new(StatusCode::BAD_REQUEST, "INVALID_CONFIG", detail),
            HubError::UnknownSession(_) => Self::new(StatusCode::NOT_FOUND, "UNKNOWN_SESSION", detail),
            HubError::Closed => Self::new(StatusCode::CONFLICT, "SESSION_CLOSED", detail),
            HubError::ShuttingDown => {
                Self::new(StatusCode::SERVICE_UNAVAILABLE, "SHUTTING_DOWN", detail)
            }
            HubError::Store(_) | HubError::Load { .. } => {
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "STORAGE_FAILURE", detail)
            }
            HubError::Engine(_) => Self::new(StatusCode::BAD_REQUEST, "REJECTED", detail),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ApiErrorBody {
            error: self.code.to_owned(),
            detail: self.detail,
        };
        (self.status, Json(body)).into_response()
    }
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

impl AppState {
    fn is_admin(&self, headers: &HeaderMap) -> bool {
        bearer(headers).is_some_and(|t| constant_time_eq(t.as_bytes(), self.admin_token.as_bytes()))
    }

    fn require_admin(&self, headers: &HeaderMap) -> Result<(), ApiError> {
        if self.is_admin(headers) {
            Ok(())
        } else {
            Err(ApiError::unauthorized())
        }
    }

    /// Resolves the session, allowing the admin or that session's leader.
    /// Unauthenticated callers learn nothing about which sessions exist.
    async fn session_for(&self, headers: &HeaderMap, id: &SessionId) -> Result<SessionHandle, ApiError> {
        let token = bearer(headers).ok_or_else(ApiError::unauthorized)?;
        let admin = self.is_admin(headers);
        let Some(session) = self.hub.session(id) else {
            return Err(if admin {
                ApiError::unknown(id)
            } else {
                ApiError::unauthorized()
            });
        };
        if admin || session.is_leader(token.to_owned()).await? {
            Ok(session)
        } else {
            Err(ApiError::unauthorized())
        }
    }
}

async fn create_session(
    State(app): State<AppState>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<impl IntoResponse, ApiError> {
    app.require_admin(&headers)?;
    let req: CreateSessionRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "INVALID_CONFIG", e.to_string()))?;
    let created = app.hub.create_session(req.config, req.roster)?;
    Ok((StatusCode::CREATED, Json(created)))
}

async fn list_sessions(
    State(app): State<AppState>,
    headers: HeaderMap,
) -> Result<Json<Vec<SessionId>>, ApiError> {
    app.require_admin(&headers)?;
    Ok(Json(app.hub.session_ids()))
}

async fn session_status(
    State(app): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<SessionId>,
) -> Result<impl IntoResponse, ApiError> {
    let session = app.session_for(&headers, &id).await?;
    Ok(Json(session.status().await?))
}

async fn update_indicator(
    State(app): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<SessionId>,
    body: Bytes,
) -> Result<StatusCode, ApiError> {
    let session = app.session_for(&headers, &id).await?;
    let policy: TypingIndicatorPolicy = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "INVALID_CONFIG", e.to_string()))?;
    session.update_policy(policy).await?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    #[serde(default)]
    format: Option<String>,
}

/// Response header carrying the last record included in an export.
pub const RECORD_SEQ_HEADER: &str = "x-record-seq";

async fn export(
    State(app): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<SessionId>,
    Query(q): Query<ExportQuery>,
) -> Result<Response, ApiError> {
    let session = app.session_for(&headers, &id).await?;
    let format: ExportFormat = q
        .format
        .as_deref()
        .unwrap_or("csv")
        .parse()
        .map_err(|e: String| ApiError::new(StatusCode::BAD_REQUEST, "BAD_FORMAT", e))?;
    let records = session.records().await?;
    let last_seq = records.last().map_or(0, |r| r.record_seq);
    let bytes = export_session(&records, format)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "CORRUPT_LOG", e.to_string()))?;
    let (mime, ext) = match format {
        ExportFormat::Csv => ("text/csv; charset=utf-8", "csv"),
        ExportFormat::Xlsx => (
            "application/vnd.openxmlformats-officedocument.spreadsheetml.sheet",
            "xlsx",
        ),
    };
    let disposition = format!("attachment; filename=\"{id}.{ext}\"");
    let mut resp = bytes.into_response();
    let h = resp.headers_mut();
    h.insert(header::CONTENT_TYPE, HeaderValue::from_static(mime));
    if let Ok(v) = HeaderValue::from_str(&disposition) {
        h.insert(header::CONTENT_DISPOSITION, v);
    }
    h.insert(RECORD_SEQ_HEADER, HeaderValue::from(last_seq));
    Ok(resp)
}

async fn close_session(
    State(app): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<SessionId>,
) -> Result<StatusCode, ApiError> {
    let session = app.session_for(&headers, &id).await?;
    session.close().await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn ws_upgrade(State(app): State<AppState>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| serve_connection(socket, app.hub))
}

async fn healthz() -> &'static str {
    "ok"
}

const PLACEHOLDER: &str = "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>parley</title></head>\n<body><p>parley gateway is running. Set <code>static_dir</code> to serve the web client here.</p></body></html>\n";

async fn placeholder() -> Html<&'static str> {
    Html(PLACEHOLDER)
}

pub fn router(hub: Arc<Hub>, admin_token: &str, static_dir: Option<PathBuf>) -> Router {
    let app = AppState {
        hub,
        admin_token: admin_token.into(),
    };
    let routes = Router::new()
        .route("/ws", get(ws_upgrade))
        .route("/healthz", get(healthz))
        .route("/api/sessions", post(create_session).get(list_sessions))
        .route("/api/sessions/{id}", get(session_status))
        .route("/api/sessions/{id}/indicator", patch(update_indicator))
        .route("/api/sessions/{id}/export", get(export))
        .route("/api/sessions/{id}/close", post(close_session))
        .with_state(app);
    match static_dir {
        Some(dir) => routes.fallback_service(ServeDir::new(dir)),
        None => routes.route("/", get(placeholder)),
    }
}
