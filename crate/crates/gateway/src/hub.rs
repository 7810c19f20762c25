//! Session registry and per-session actors.
//!
//! Each session is owned by one task that holds its [`SessionState`] and
//! [`FileLog`]. Connections and admin requests talk to it over a command
//! channel, so all events of a session are serialized in one place. Records
//! are persisted before any frame derived from them is queued.
//!
//! Outgoing frames go through a bounded queue per connection. A connection
//! whose queue is full is dropped with a `LEAVE` (`BACKPRESSURE`); the session
//! never waits for it.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, oneshot, watch, Notify};
use tokio::time::MissedTickBehavior;

use parley_core::engine::EngineError;
use parley_core::store::log_path;
use parley_core::wire::{ErrorCode, ServerBody};
use parley_core::{
    ChatMode, ClientBody, Effects, EventRecord, FileLog, Identity, LeaveReason, Millis,
    Participant, ParticipantId, ParticipantKind, ServerFrame, SessionConfig, SessionId,
    SessionState, StoreError, TypingIndicatorPolicy, ValidationError,
};

const COMMAND_QUEUE: usize = 4096;

pub fn now_ms() -> Millis {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as Millis)
        .unwrap_or(0)
}

pub fn error_frame(code: ErrorCode, detail: impl Into<String>, fatal: bool) -> ServerFrame {
    ServerFrame {
        record_seq: 0,
        body: ServerBody::Error {
            code,
            detail: detail.into(),
            fatal,
        },
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HubError {
    #[error("session {0} already exists")]
    Exists(SessionId),
    #[error("invalid session config: {}", join_errors(.0))]
    Invalid(Vec<ValidationError>),
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("session is closed")]
    Closed,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot load {path}: {reason}")]
    Load { path: PathBuf, reason: String },
    #[error("gateway is shutting down")]
    ShuttingDown,
    #[error(transparent)]
    Engine(#[from] EngineError),
}

fn join_errors(errs: &[ValidationError]) -> String {
    errs.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// One roster entry of a session creation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantSpec {
    pub kind: ParticipantKind,
    pub identities: Vec<Identity>,
    /// Assigned as `<kind>-<n>` when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub participant_id: Option<String>,
}

/// Join credentials handed out once at session creation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssuedToken {
    pub participant_id: ParticipantId,
    pub kind: ParticipantKind,
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreatedSession {
    pub session_id: SessionId,
    pub participants: Vec<IssuedToken>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantStatus {
    pub participant_id: ParticipantId,
    pub kind: ParticipantKind,
    pub connected: bool,
    pub active_identity: Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStatus {
    pub session_id: SessionId,
    pub title: String,
    pub mode: ChatMode,
    pub closed: bool,
    pub record_count: u64,
    pub message_count: u64,
    pub indicator_policy: TypingIndicatorPolicy,
    pub participants: Vec<ParticipantStatus>,
}

fn new_token() -> String {
    let mut bytes = [0u8; 24];
    rand::thread_rng().fill_bytes(&mut bytes);
    hex::encode(bytes)
}

pub type ConnId = u64;

#[derive(Debug)]
pub enum Outbound {
    Frame(ServerFrame),
    /// Flush what is queued, then close the transport.
    Close,
}

/// The session's handle on one live connection.
#[derive(Debug, Clone)]
pub struct ConnHandle {
    pub tx: mpsc::Sender<Outbound>,
    /// Close immediately, discarding anything still queued.
    pub kick: Arc<Notify>,
}

impl ConnHandle {
    pub fn channel(capacity: usize) -> (Self, mpsc::Receiver<Outbound>) {
        let (tx, rx) = mpsc::channel(capacity);
        (
            Self {
                tx,
                kick: Arc::new(Notify::new()),
            },
            rx,
        )
    }
}

enum Command {
    Join {
        conn: ConnId,
        token: String,
        hello_client_ts_ms: Millis,
        handle: ConnHandle,
        reply: oneshot::Sender<Result<ParticipantId, EngineError>>,
    },
    Client {
        conn: ConnId,
        pid: ParticipantId,
        body: ClientBody,
    },
    Disconnect {
        conn: ConnId,
        pid: ParticipantId,
    },
    UpdatePolicy {
        policy: TypingIndicatorPolicy,
        reply: oneshot::Sender<Result<(), HubError>>,
    },
    IsLeader {
        token: String,
        reply: oneshot::Sender<bool>,
    },
    Status {
        reply: oneshot::Sender<SessionStatus>,
    },
    Records {
        reply: oneshot::Sender<Vec<EventRecord>>,
    },
    Close {
        reply: oneshot::Sender<()>,
    },
}

/// Cheap cloneable reference to a running session actor.
#[derive(Clone)]
pub struct SessionHandle {
    tx: mpsc::Sender<Command>,
}

impl SessionHandle {
    async fn ask<T>(&self, make: impl FnOnce(oneshot::Sender<T>) -> Command) -> Result<T, HubError> {
        let (reply, rx) = oneshot::channel();
        self.tx
            .send(make(reply))
            .await
            .map_err(|_| HubError::ShuttingDown)?;
        rx.await.map_err(|_| HubError::ShuttingDown)
    }

    /// Admits a connection. On success the WELCOME frame is already queued
    /// on `handle`.
    pub async fn join(
        &self,
        conn: ConnId,
        token: String,
        hello_client_ts_ms: Millis,
        handle: ConnHandle,
    ) -> Result<Result<ParticipantId, EngineError>, HubError> {
        self.ask(|reply| Command::Join {
            conn,
            token,
            hello_client_ts_ms,
            handle,
            reply,
        })
        .await
    }

    pub async fn client_frame(&self, conn: ConnId, pid: ParticipantId, body: ClientBody) -> Result<(), HubError> {
        self.tx
            .send(Command::Client { conn, pid, body })
            .await
            .map_err(|_| HubError::ShuttingDown)
    }

    pub async fn disconnect(&self, conn: ConnId, pid: ParticipantId) {
        let _ = self.tx.send(Command::Disconnect { conn, pid }).await;
    }

    pub async fn update_policy(&self, policy: TypingIndicatorPolicy) -> Result<(), HubError> {
        self.ask(|reply| Command::UpdatePolicy { policy, reply }).await?
    }

    pub async fn is_leader(&self, token: String) -> Result<bool, HubError> {
        self.ask(|reply| Command::IsLeader { token, reply }).await
    }

    pub async fn status(&self) -> Result<SessionStatus, HubError> {
        self.ask(|reply| Command::Status { reply }).await
    }

    /// Snapshot of the log up to the latest committed record.
    pub async fn records(&self) -> Result<Vec<EventRecord>, HubError> {
        self.ask(|reply| Command::Records { reply }).await
    }

    pub async fn close(&self) -> Result<(), HubError> {
        self.ask(|reply| Command::Close { reply }).await
    }
}

#[derive(Debug, Clone)]
pub struct HubConfig {
    pub data_dir: PathBuf,
    pub fsync: bool,
    pub tick_ms: u64,
    pub queue_capacity: usize,
}

pub struct Hub {
    config: HubConfig,
    sessions: RwLock<BTreeMap<SessionId, SessionHandle>>,
    next_conn: AtomicU64,
    shutdown: watch::Sender<bool>,
}

impl Hub {
    /// Loads every session log in `data_dir` and starts its actor. Anyone
    /// still marked connected in a log gets a `LEAVE` (`RESTART`) record.
    /// Must run inside a Tokio runtime.
    pub fn load(config: HubConfig) -> Result<Arc<Self>, HubError> {
        let (shutdown, _) = watch::channel(false);
        let hub = Arc::new(Self {
            config,
            sessions: RwLock::new(BTreeMap::new()),
            next_conn: AtomicU64::new(1),
            shutdown,
        });
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&hub.config.data_dir)
            .map_err(StoreError::from)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "log"))
            .collect();
        paths.sort();
        for path in paths {
            if let Some((state, log)) = hub.restore(&path)? {
                let sid = state.session_id().clone();
                let handle = hub.spawn_actor(state, log);
                hub.sessions.write().expect("session map poisoned").insert(sid, handle);
            }
        }
        Ok(hub)
    }

    fn restore(&self, path: &Path) -> Result<Option<(SessionState, FileLog)>, HubError> {
        let load_err = |reason: String| HubError::Load {
            path: path.to_owned(),
            reason,
        };
        let mut log = FileLog::open(path, self.config.fsync).map_err(|e| load_err(e.to_string()))?;
        if log.records().is_empty() {
            tracing::warn!(path = %path.display(), "skipping empty session log");
            return Ok(None);
        }
        let mut state = SessionState::replay(log.records()).map_err(|e| load_err(e.to_string()))?;
        let stale: Vec<ParticipantId> = state.connected().cloned().collect();
        let now = now_ms();
        for pid in stale {
            for rec in state.leave(&pid, LeaveReason::Restart, now).records {
                log.append(rec)?;
            }
        }
        tracing::info!(session = %state.session_id(), records = log.records().len(), "session restored");
        Ok(Some((state, log)))
    }

    fn spawn_actor(&self, state: SessionState, log: FileLog) -> SessionHandle {
        let (tx, rx) = mpsc::channel(COMMAND_QUEUE);
        let actor = Actor {
            state,
            log,
            conns: HashMap::new(),
        };
        tokio::spawn(actor.run(rx, self.config.tick_ms, self.shutdown.subscribe()));
        SessionHandle { tx }
    }

    pub fn config(&self) -> &HubConfig {
        &self.config
    }

    pub fn next_conn_id(&self) -> ConnId {
        self.next_conn.fetch_add(1, Ordering::Relaxed)
    }

    pub fn session(&self, id: &SessionId) -> Option<SessionHandle> {
        self.sessions.read().expect("session map poisoned").get(id).cloned()
    }

    pub fn session_ids(&self) -> Vec<SessionId> {
        self.sessions.read().expect("session map poisoned").keys().cloned().collect()
    }

    /// Fires when [`Hub::shutdown`] is called.
    pub fn shutdown_signal(&self) -> watch::Receiver<bool> {
        self.shutdown.subscribe()
    }

    /// Stops all session actors and closes their connections. Logs are left
    /// as they are; the next start records the dropped connections.
    pub fn shutdown(&self) {
        self.shutdown.send_replace(true);
        self.sessions.write().expect("session map poisoned").clear();
    }

    /// Validates and persists a new session, returning one token per
    /// participant. Tokens are only stored as digests.
    pub fn create_session(
        &self,
        config: SessionConfig,
        roster: Vec<ParticipantSpec>,
    ) -> Result<CreatedSession, HubError> {
        if *self.shutdown.borrow() {
            return Err(HubError::ShuttingDown);
        }
        let mut counters: BTreeMap<&'static str, usize> = BTreeMap::new();
        let mut issued = Vec::new();
        let mut participants = Vec::new();
        for spec in roster {
            let prefix = match spec.kind {
                ParticipantKind::Subject => "subject",
                ParticipantKind::Wizard => "wizard",
                ParticipantKind::Leader => "leader",
                ParticipantKind::Bot => "bot",
            };
            let n = counters.entry(prefix).or_default();
            *n += 1;
            let pid = spec.participant_id.unwrap_or_else(|| format!("{prefix}-{n}"));
            let token = new_token();
            participants.push(Participant::new(pid.clone(), &token, spec.kind, spec.identities));
            issued.push(IssuedToken {
                participant_id: pid.into(),
                kind: spec.kind,
                token,
            });
        }
        let sid = config.session_id.clone();
        let (state, created) =
            SessionState::create(config, participants, now_ms()).map_err(HubError::Invalid)?;
        // hold the write lock so two requests cannot race on one id
        let mut sessions = self.sessions.write().expect("session map poisoned");
        let path = log_path(&self.config.data_dir, &sid);
        if sessions.contains_key(&sid) || path.exists() {
            return Err(HubError::Exists(sid));
        }
        let mut log = FileLog::create(&path, self.config.fsync)?;
        log.append(created)?;
        sessions.insert(sid.clone(), self.spawn_actor(state, log));
        tracing::info!(session = %sid, "session created");
        Ok(CreatedSession {
            session_id: sid,
            participants: issued,
        })
    }
}

struct Actor {
    state: SessionState,
    log: FileLog,
    conns: HashMap<ParticipantId, (ConnId, ConnHandle)>,
}

impl Actor {
    async fn run(
        mut self,
        mut rx: mpsc::Receiver<Command>,
        tick_ms: u64,
        mut shutdown: watch::Receiver<bool>,
    ) {
        let mut tick = tokio::time::interval(Duration::from_millis(tick_ms));
        tick.set_missed_tick_behavior(MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                cmd = rx.recv() => match cmd {
                    Some(cmd) => self.handle(cmd),
                    None => break,
                },
                _ = tick.tick() => {
                    let effects = self.state.tick(now_ms());
                    self.dispatch(effects);
                }
                _ = shutdown.wait_for(|stop| *stop) => break,
            }
        }
        for (_, (_, conn)) in self.conns.drain() {
            let _ = conn.tx.try_send(Outbound::Close);
            conn.kick.notify_one();
        }
    }

    fn handle(&mut self, cmd: Command) {
        let now = now_ms();
        match cmd {
            Command::Join {
                conn,
                token,
                hello_client_ts_ms,
                handle,
                reply,
            } => {
                let outcome = match self.state.join(&token, hello_client_ts_ms, now) {
                    Ok(o) => o,
                    Err(e) => {
                        let _ = reply.send(Err(e));
                        return;
                    }
                };
                let pid = outcome.participant_id.clone();
                if let Some((_, old)) = self.conns.remove(&pid) {
                    let _ = old.tx.try_send(Outbound::Frame(error_frame(
                        ErrorCode::NotConnected,
                        "superseded by a newer connection",
                        true,
                    )));
                    let _ = old.tx.try_send(Outbound::Close);
                }
                self.persist(&outcome.effects);
                // the fresh queue cannot be full
                let _ = handle.tx.try_send(Outbound::Frame(outcome.welcome));
                self.conns.insert(pid.clone(), (conn, handle));
                self.deliver(outcome.effects);
                let _ = reply.send(Ok(pid));
            }
            Command::Client { conn, pid, body } => {
                if !self.is_current(conn, &pid) {
                    return;
                }
                self.client(&pid, body, now);
            }
            Command::Disconnect { conn, pid } => {
                if self.is_current(conn, &pid) {
                    self.conns.remove(&pid);
                    let effects = self.state.leave(&pid, LeaveReason::Disconnect, now);
                    self.dispatch(effects);
                }
            }
            Command::UpdatePolicy { policy, reply } => {
                let result = self
                    .state
                    .update_policy(policy, now)
                    .map(|effects| self.dispatch(effects))
                    .map_err(|e| match e {
                        EngineError::InvalidPolicy(errs) => HubError::Invalid(errs),
                        EngineError::SessionClosed => HubError::Closed,
                        other => HubError::Engine(other),
                    });
                let _ = reply.send(result);
            }
            Command::IsLeader { token, reply } => {
                let ok = self
                    .state
                    .participant_by_token(&token)
                    .is_some_and(|p| p.kind == ParticipantKind::Leader);
                let _ = reply.send(ok);
            }
            Command::Status { reply } => {
                let _ = reply.send(self.status());
            }
            Command::Records { reply } => {
                let _ = reply.send(self.log.records().to_vec());
            }
            Command::Close { reply } => {
                let effects = self.state.close(now);
                self.dispatch(effects);
                let pids: Vec<ParticipantId> = self.conns.keys().cloned().collect();
                for pid in pids {
                    self.send(&pid, error_frame(ErrorCode::SessionClosed, "session closed", true));
                    if let Some((_, conn)) = self.conns.remove(&pid) {
                        let _ = conn.tx.try_send(Outbound::Close);
                    }
                    let effects = self.state.leave(&pid, LeaveReason::Bye, now);
                    self.dispatch(effects);
                }
                let _ = reply.send(());
            }
        }
    }

    fn client(&mut self, pid: &ParticipantId, body: ClientBody, now: Millis) {
        let result = match body {
            ClientBody::Hello { .. } => {
                self.send(
                    pid,
                    error_frame(ErrorCode::ProtocolViolation, "already joined", false),
                );
                return;
            }
            ClientBody::Bye => {
                if let Some((_, conn)) = self.conns.remove(pid) {
                    let _ = conn.tx.try_send(Outbound::Close);
                }
                Ok(self.state.leave(pid, LeaveReason::Bye, now))
            }
            ClientBody::Input { event } => self.state.ingest_input(pid, event, now),
            ClientBody::Submit { text, client_ts_ms } => {
                self.state.submit_message(pid, &text, client_ts_ms, now)
            }
            ClientBody::SwitchIdentity { identity_index } => {
                self.state.switch_identity(pid, identity_index, now)
            }
            ClientBody::Annotate {
                target_message_id,
                annotation,
                study_internal,
            } => self
                .state
                .annotate(pid, &target_message_id, annotation, study_internal, now),
            ClientBody::SetIndicator { mode } => self.state.set_indicator(pid, mode, now),
        };
        match result {
            Ok(effects) => self.dispatch(effects),
            Err(e) => {
                self.send(pid, e.to_frame());
                if e.is_fatal() {
                    if let Some((_, conn)) = self.conns.remove(pid) {
                        let _ = conn.tx.try_send(Outbound::Close);
                    }
                    let effects = self.state.leave(pid, LeaveReason::Disconnect, now);
                    self.dispatch(effects);
                }
            }
        }
    }

    fn is_current(&self, conn: ConnId, pid: &ParticipantId) -> bool {
        self.conns.get(pid).is_some_and(|(c, _)| *c == conn)
    }

    fn status(&self) -> SessionStatus {
        let cfg = &self.state.config;
        SessionStatus {
            session_id: cfg.session_id.clone(),
            title: cfg.title.clone(),
            mode: cfg.mode,
            closed: self.state.closed,
            record_count: self.log.records().len() as u64,
            message_count: self.state.messages.len() as u64,
            indicator_policy: cfg.indicator_policy.clone(),
            participants: self
                .state
                .roster
                .values()
                .map(|e| ParticipantStatus {
                    participant_id: e.participant.participant_id.clone(),
                    kind: e.participant.kind,
                    connected: e.connected,
                    active_identity: e.participant.active_identity().clone(),
                })
                .collect(),
        }
    }

    fn persist(&mut self, effects: &Effects) {
        for rec in &effects.records {
            if let Err(e) = self.log.append(rec.clone()) {
                tracing::error!(session = %self.state.session_id(), seq = rec.record_seq, error = %e, "log append failed");
            }
        }
    }

    fn dispatch(&mut self, effects: Effects) {
        self.persist(&effects);
        self.deliver(effects);
    }

    fn send(&mut self, pid: &ParticipantId, frame: ServerFrame) -> Option<LeaveReason> {
        let (_, conn) = self.conns.get(pid)?;
        match conn.tx.try_send(Outbound::Frame(frame)) {
            Ok(()) => None,
            Err(mpsc::error::TrySendError::Full(_)) => Some(LeaveReason::Backpressure),
            Err(mpsc::error::TrySendError::Closed(_)) => Some(LeaveReason::Disconnect),
        }
    }

    fn deliver(&mut self, effects: Effects) {
        let mut dropped: Vec<(ParticipantId, LeaveReason)> = Vec::new();
        for d in effects.deliveries {
            if dropped.iter().any(|(p, _)| *p == d.to) {
                continue;
            }
            if let Some(reason) = self.send(&d.to, d.frame) {
                dropped.push((d.to, reason));
            }
        }
        for (pid, reason) in dropped {
            if let Some((_, conn)) = self.conns.remove(&pid) {
                tracing::warn!(session = %self.state.session_id(), participant = %pid, ?reason, "dropping connection");
                conn.kick.notify_one();
            }
            let effects = self.state.leave(&pid, reason, now_ms());
            self.dispatch(effects);
        }
    }
}
