#![allow(dead_code)]

use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

use parley_core::{
    decode_frame, encode_frame, ClientBody, ClientFrame, EventRecord, ServerBody, ServerFrame,
};
use parley_gateway::{start, CreatedSession, Gateway, GatewayConfig};

pub const ADMIN: &str = "admin-secret";

pub struct TestServer {
    pub gateway: Gateway,
    pub dir: tempfile::TempDir,
    pub http: reqwest::Client,
}

pub async fn server() -> TestServer {
    server_with(|_| {}).await
}

pub async fn server_with(tweak: impl FnOnce(&mut GatewayConfig)) -> TestServer {
    let dir = tempfile::tempdir().unwrap();
    let mut config = GatewayConfig::new(dir.path(), ADMIN);
    config.bind_address = "127.0.0.1:0".into();
    config.fsync = false;
    config.session_tick_ms = 50;
    tweak(&mut config);
    TestServer {
        gateway: start(config).await.unwrap(),
        dir,
        http: reqwest::Client::new(),
    }
}

impl TestServer {
    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.gateway.http_url())
    }

    pub async fn create(&self, body: Value) -> CreatedSession {
        let resp = self
            .http
            .post(self.url("/api/sessions"))
            .bearer_auth(ADMIN)
            .json(&body)
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status(), 201, "{}", resp.text().await.unwrap());
        resp.json().await.unwrap()
    }

    pub fn log_records(&self, session_id: &str) -> Vec<EventRecord> {
        let path = self.dir.path().join(format!("{session_id}.log"));
        parley_core::store::read_log_file(&path).unwrap()
    }

    pub async fn client(&self, session_id: &str, token: &str) -> (Client, ServerFrame) {
        let mut c = Client::connect(&self.gateway.ws_url()).await;
        c.send(ClientBody::Hello {
            session_id: session_id.into(),
            token: token.into(),
            client_ts_ms: 0,
        })
        .await;
        let welcome = c.recv().await.expect("welcome");
        (c, welcome)
    }
}

/// Subject + wizard with two identities.
pub fn pair_body(session_id: &str, mode: &str, indicator: Value) -> Value {
    json!({
        "config": {
            "session_id": session_id,
            "mode": mode,
            "max_participants": 3,
            "indicator_policy": indicator,
        },
        "roster": [
            {"kind": "SUBJECT", "identities": [{"display_name": "Sam", "role_label": "customer"}]},
            {"kind": "WIZARD", "identities": [
                {"display_name": "Ava", "role_label": "insurance agent"},
                {"display_name": "Max", "role_label": "computer", "presented_as_machine": true}
            ]},
            {"kind": "LEADER", "identities": [{"display_name": "Lee", "role_label": "study leader"}]}
        ]
    })
}

pub fn token<'a>(created: &'a CreatedSession, kind: &str) -> &'a str {
    let want: parley_core::ParticipantKind = serde_json::from_value(json!(kind)).unwrap();
    &created
        .participants
        .iter()
        .find(|p| p.kind == want)
        .unwrap()
        .token
}

pub struct Client {
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
    seq: u64,
}

impl Client {
    pub async fn connect(url: &str) -> Self {
        let (ws, _) = tokio_tungstenite::connect_async(url).await.unwrap();
        Self { ws, seq: 0 }
    }

    pub async fn send(&mut self, body: ClientBody) {
        self.seq += 1;
        let frame = ClientFrame {
            client_seq: self.seq,
            body,
        };
        self.send_raw(encode_frame(&frame)).await;
    }

    pub async fn send_raw(&mut self, bytes: Vec<u8>) {
        let text = String::from_utf8(bytes).unwrap();
        self.ws.send(Message::text(text)).await.unwrap();
    }

    pub fn set_seq(&mut self, seq: u64) {
        self.seq = seq;
    }

    /// Next frame, or `None` on close or after two seconds of silence.
    pub async fn recv(&mut self) -> Option<ServerFrame> {
        self.recv_within(Duration::from_secs(2)).await
    }

    pub async fn recv_within(&mut self, wait: Duration) -> Option<ServerFrame> {
        loop {
            let msg = tokio::time::timeout(wait, self.ws.next()).await.ok()??.ok()?;
            match msg {
                Message::Text(t) => return Some(decode_frame(t.as_bytes()).unwrap()),
                Message::Close(_) => return None,
                _ => continue,
            }
        }
    }

    /// Frames until one matches `pred` (inclusive).
    pub async fn recv_until(&mut self, pred: impl Fn(&ServerFrame) -> bool) -> Vec<ServerFrame> {
        let mut out = Vec::new();
        while let Some(f) = self.recv().await {
            let hit = pred(&f);
            out.push(f);
            if hit {
                return out;
            }
        }
        panic!("stream ended before expected frame; got {out:?}");
    }

    /// Everything that arrives until `quiet` passes without a frame.
    pub async fn drain(&mut self, quiet: Duration) -> Vec<ServerFrame> {
        let mut out = Vec::new();
        while let Some(f) = self.recv_within(quiet).await {
            out.push(f);
        }
        out
    }

    pub async fn close(mut self) {
        let _ = self.ws.close(None).await;
    }

    /// Drops the TCP connection without a close handshake.
    pub fn abort(self) {
        drop(self.ws);
    }
}

pub fn is_kind(f: &ServerFrame, kind: &str) -> bool {
    f.body.kind_name() == kind
}

pub fn is_error(f: &ServerFrame) -> bool {
    matches!(f.body, ServerBody::Error { .. })
}
