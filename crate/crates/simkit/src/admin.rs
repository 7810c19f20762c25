//! HTTP client for the gateway's admin API.

use reqwest::StatusCode;

use parley_core::{ExportFormat, SessionId};
use parley_gateway::api::{ApiErrorBody, RECORD_SEQ_HEADER};
use parley_gateway::{CreateSessionRequest, CreatedSession, SessionStatus};

use crate::error::SimError;

#[derive(Debug, Clone)]
pub struct AdminClient {
    base: String,
    token: String,
    http: reqwest::Client,
}

/// Bytes of a live export and the last record they include.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LiveExport {
    pub bytes: Vec<u8>,
    pub record_seq: u64,
}

impl AdminClient {
    /// `server` is the gateway's base URL, e.g. `http://127.0.0.1:8080`.
    pub fn new(server: &str, token: impl Into<String>) -> Self {
        Self {
            base: server.trim_end_matches('/').to_owned(),
            token: token.into(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    /// The chat endpoint on the same host.
    pub fn ws_url(&self) -> String {
        let rest = self
            .base
            .strip_prefix("https://")
            .map(|r| format!("wss://{r}"))
            .or_else(|| self.base.strip_prefix("http://").map(|r| format!("ws://{r}")))
            .unwrap_or_else(|| format!("ws://{}", self.base));
        format!("{rest}/ws")
    }

    fn connect_failed(&self, e: reqwest::Error) -> SimError {
        SimError::ConnectFailed {
            url: self.base.clone(),
            reason: e.to_string(),
        }
    }

    async fn check(&self, resp: reqwest::Response) -> Result<reqwest::Response, SimError> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().await.unwrap_or_default();
        let (code, detail) = match serde_json::from_str::<ApiErrorBody>(&text) {
            Ok(b) => (b.error, b.detail),
            Err(_) => (status.as_str().to_owned(), text),
        };
        Err(if status == StatusCode::UNAUTHORIZED {
            SimError::Unauthorized(format!("{code}: {detail}"))
        } else {
            SimError::Server { code, detail }
        })
    }

    pub async fn create_session(&self, request: &CreateSessionRequest) -> Result<CreatedSession, SimError> {
        let resp = self
            .http
            .post(format!("{}/api/sessions", self.base))
            .bearer_auth(&self.token)
            .json(request)
            .send()
            .await
            .map_err(|e| self.connect_failed(e))?;
        let resp = self.check(resp).await?;
        resp.json().await.map_err(|e| SimError::Server {
            code: "BAD_RESPONSE".into(),
            detail: e.to_string(),
        })
    }

    pub async fn status(&self, session_id: &SessionId) -> Result<SessionStatus, SimError> {
        let resp = self
            .http
            .get(format!("{}/api/sessions/{session_id}", self.base))
            .bearer_auth(&self.token)
            .send()
            .await
            .map_err(|e| self.connect_failed(e))?;
        let resp = self.check(resp).await?;
        resp.json().await.map_err(|e| SimError::Server {
            code: "BAD_RESPONSE".into(),
            detail: e.to_string(),
        })
    }

    pub async fn export(&self, session_id: &SessionId, format: ExportFormat) -> Result<LiveExport, SimError> {
        let fmt = match format {
            ExportFormat::Csv => "csv",
            ExportFormat::Xlsx => "xlsx",
        };
        let resp = self
            .http
            .get(format!("{}/api/sessions/{session_id}/export?format={fmt}", self.base))
            .bearer_auth(&self.token)
            .send()
            .await
            .map_err(|e| self.connect_failed(e))?;
        let resp = self.check(resp).await?;
        let record_seq = resp
            .headers()
            .get(RECORD_SEQ_HEADER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| SimError::Server {
                code: "BAD_RESPONSE".into(),
                detail: format!("export lacks {RECORD_SEQ_HEADER}"),
            })?;
        let bytes = resp.bytes().await.map_err(|e| self.connect_failed(e))?.to_vec();
        Ok(LiveExport { bytes, record_seq })
    }

    pub async fn close(&self, session_id: &SessionId) -> Result<(), SimError> {
        let resp = self
            .http
            .post(format!("{}/api/sessions/{session_id}/close", self.base))
            .bearer_auth(&self.token)
            .send()
            .await
            .map_err(|e| self.connect_failed(e))?;
        self.check(resp).await.map(drop)
    }
}
