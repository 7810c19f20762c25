//! Runs one participant script over a real WebSocket connection.
//!
//! Client timestamps are the scheduled offsets of the script, not wall
//! clock, so a scenario with a fixed seed sends the same telemetry on every
//! run. Frames go out as close to their scheduled time as the runtime allows.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use futures_util::stream::{SplitSink, StreamExt};
use futures_util::SinkExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio::sync::{watch, Barrier};
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

use parley_core::{
    decode_frame, encode_frame, AnnotationBody, ChatMode, ClientBody, ClientFrame, ErrorCode,
    InputEvent, MessageId, ServerBody, ServerFrame, SessionId,
};

use crate::error::SimError;
use crate::scenario::{Action, AnnotateKind, ParticipantScript};
use crate::transcript::{Direction, Entry, Transcript};

type Sink = SplitSink<WebSocketStream<MaybeTlsStream<TcpStream>>, Message>;

/// Where and as whom a script connects.
#[derive(Debug, Clone)]
pub struct Target {
    pub ws_url: String,
    pub session_id: SessionId,
    pub token: String,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Time zero for the script's `at_ms` offsets.
    pub epoch: Instant,
    pub seed: u64,
    /// How long to keep listening after the last step.
    pub settle: Duration,
    pub connect_timeout: Duration,
}

impl RunOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            epoch: Instant::now(),
            seed,
            settle: Duration::from_millis(500),
            connect_timeout: Duration::from_secs(5),
        }
    }
}

#[derive(Debug, Default, Clone)]
struct Progress {
    welcome_mode: Option<ChatMode>,
    refused: Option<(ErrorCode, String)>,
    max_session_seq: u64,
    closed: bool,
}

struct Conn {
    sink: Sink,
    reader: JoinHandle<()>,
    progress: watch::Receiver<Progress>,
}

struct Runner<'a> {
    target: &'a Target,
    script: &'a ParticipantScript,
    opts: &'a RunOptions,
    log: Arc<Mutex<Transcript>>,
    conn: Option<Conn>,
    conn_no: u32,
    client_seq: u64,
    mode: ChatMode,
    draft: Vec<char>,
    max_session_seq: u64,
    cursor: u64,
    rng: ChaCha8Rng,
}

/// Runs `script` to completion. With `finish`, waits there for the other
/// scripts before lingering and saying BYE, so nobody leaves while peers
/// are still talking.
pub async fn run_script(
    target: &Target,
    script: &ParticipantScript,
    opts: &RunOptions,
    finish: Option<Arc<Barrier>>,
) -> Result<Transcript, SimError> {
    let mut runner = Runner {
        target,
        script,
        opts,
        log: Arc::new(Mutex::new(Transcript::new(&script.name, script.kind))),
        conn: None,
        conn_no: 0,
        client_seq: 0,
        mode: ChatMode::QuasiSync,
        draft: Vec::new(),
        max_session_seq: 0,
        cursor: 0,
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
    };
    let outcome = runner.run().await;
    if let Some(barrier) = finish {
        barrier.wait().await;
    }
    if outcome.is_ok() && runner.conn.is_some() {
        tokio::time::sleep(opts.settle).await;
        runner.hang_up(false).await;
    } else if runner.conn.is_some() {
        runner.hang_up(true).await;
    }
    outcome?;
    let transcript = runner.log.lock().unwrap().clone();
    Ok(transcript)
}

impl Runner<'_> {
    async fn run(&mut self) -> Result<(), SimError> {
        self.script
            .check_kind_only()
            .map_err(SimError::ScriptInvalid)?;
        self.connect(0).await?;
        for step in &self.script.steps {
            let t = self.cursor.max(step.at_ms);
            self.cursor = t;
            self.act(&step.action, t).await?;
        }
        Ok(())
    }

    fn elapsed_ms(&self) -> f64 {
        self.opts.epoch.elapsed().as_secs_f64() * 1000.0
    }

    fn note(&self, dir: Direction, frame: Value) {
        let entry = Entry {
            t_ms: self.elapsed_ms(),
            conn: self.conn_no,
            dir,
            frame,
        };
        self.log.lock().unwrap().entries.push(entry);
    }

    async fn sleep_until(&self, at_ms: u64) {
        let when = self.opts.epoch + Duration::from_millis(at_ms);
        tokio::time::sleep_until(when.into()).await;
    }

    async fn connect(&mut self, t: u64) -> Result<(), SimError> {
        self.sleep_until(t).await;
        let failed = |reason: String| SimError::ConnectFailed {
            url: self.target.ws_url.clone(),
            reason,
        };
        let (ws, _) = tokio::time::timeout(
            self.opts.connect_timeout,
            tokio_tungstenite::connect_async_with_config(&self.target.ws_url, None, true),
        )
        .await
        .map_err(|_| failed("timed out".into()))?
        .map_err(|e| failed(e.to_string()))?;
        self.conn_no += 1;
        self.note(Direction::Event, json!({"event": "connected"}));
        let (sink, mut stream) = ws.split();
        let (tx, rx) = watch::channel(Progress {
            max_session_seq: self.max_session_seq,
            ..Progress::default()
        });
        let log = self.log.clone();
        let epoch = self.opts.epoch;
        let conn_no = self.conn_no;
        let reader = tokio::spawn(async move {
            let push = |dir, frame| {
                log.lock().unwrap().entries.push(Entry {
                    t_ms: epoch.elapsed().as_secs_f64() * 1000.0,
                    conn: conn_no,
                    dir,
                    frame,
                })
            };
            while let Some(Ok(msg)) = stream.next().await {
                let text = match msg {
                    Message::Text(t) => t,
                    Message::Close(_) => break,
                    _ => continue,
                };
                let value: Value = serde_json::from_str(&text).unwrap_or_else(|_| json!({"unparsed": text.as_str()}));
                push(Direction::Recv, value);
                let Ok(frame) = decode_frame::<ServerFrame>(text.as_bytes()) else {
                    continue;
                };
                match frame.body {
                    ServerBody::Welcome(w) => {
                        let top = w.messages.iter().map(|m| m.session_seq).max().unwrap_or(0);
                        log.lock().unwrap().participant_id = Some(w.participant_id.clone());
                        tx.send_modify(|p| {
                            p.welcome_mode = Some(w.session.mode);
                            p.max_session_seq = p.max_session_seq.max(top);
                        });
                    }
                    ServerBody::MessagePosted { message } => {
                        tx.send_modify(|p| p.max_session_seq = p.max_session_seq.max(message.session_seq));
                    }
                    ServerBody::Error {
                        code,
                        detail,
                        fatal: true,
                    } => tx.send_modify(|p| p.refused = Some((code, detail))),
                    _ => {}
                }
            }
            push(Direction::Event, json!({"event": "closed"}));
            tx.send_modify(|p| p.closed = true);
        });
        self.conn = Some(Conn {
            sink,
            reader,
            progress: rx,
        });
        self.send(ClientBody::Hello {
            session_id: self.target.session_id.clone(),
            token: self.target.token.clone(),
            client_ts_ms: t as i64,
        })
        .await?;

        let mut progress = self.conn.as_ref().unwrap().progress.clone();
        let state = match tokio::time::timeout(
            self.opts.connect_timeout,
            progress.wait_for(|p| p.welcome_mode.is_some() || p.refused.is_some() || p.closed),
        )
        .await
        {
            Ok(Ok(p)) => p.clone(),
            _ => Progress::default(),
        };
        if let Some(mode) = state.welcome_mode {
            self.mode = mode;
            self.max_session_seq = state.max_session_seq;
            return Ok(());
        }
        self.hang_up(true).await;
        Err(match state.refused {
            Some((code, detail)) => SimError::Refused {
                participant: self.script.name.clone(),
                code,
                detail,
            },
            None => failed("no WELCOME after HELLO".into()),
        })
    }

    async fn send(&mut self, body: ClientBody) -> Result<(), SimError> {
        self.client_seq += 1;
        let frame = ClientFrame {
            client_seq: self.client_seq,
            body,
        };
        let bytes = encode_frame(&frame);
        let mut shown: Value = serde_json::from_slice(&bytes).expect("canonical frame is JSON");
        if let Some(token) = shown.pointer_mut("/body/token") {
            *token = json!("<redacted>");
        }
        self.note(Direction::Sent, shown);
        let text = String::from_utf8(bytes).expect("canonical frame is UTF-8");
        let conn = self.conn.as_mut().expect("connected");
        conn.sink
            .send(Message::text(text))
            .await
            .map_err(|e| SimError::ConnectFailed {
                url: self.target.ws_url.clone(),
                reason: format!("send failed: {e}"),
            })
    }

    /// Sends one input event at scheduled time `t`.
    async fn input(&mut self, t: u64, event: InputEvent) -> Result<(), SimError> {
        self.sleep_until(t).await;
        self.send(ClientBody::Input { event }).await
    }

    fn draft_len(&self) -> u32 {
        self.draft.len() as u32
    }

    fn show_text(&self) -> bool {
        self.mode == ChatMode::Sync || self.script.send_draft_text
    }

    async fn act(&mut self, action: &Action, t: u64) -> Result<(), SimError> {
        match action {
            Action::Type {
                text,
                delay_ms,
                jitter_ms,
            } => {
                let mut at = t;
                for (i, ch) in text.chars().enumerate() {
                    if i > 0 {
                        at += delay_ms + self.rng.gen_range(0..=*jitter_ms);
                    }
                    self.draft.push(ch);
                    let event = if self.show_text() {
                        InputEvent::typed(at as i64, &ch.to_string(), self.draft_len())
                    } else {
                        InputEvent::key_down(at as i64, 1, self.draft_len())
                    };
                    self.input(at, event).await?;
                }
                self.cursor = at;
            }
            Action::Paste { text } => {
                self.draft.extend(text.chars());
                let n = text.chars().count() as u32;
                let event = if self.show_text() {
                    InputEvent::typed(t as i64, text, self.draft_len())
                } else {
                    InputEvent::key_down(t as i64, n, self.draft_len())
                };
                self.input(t, event).await?;
            }
            Action::Erase { count, delay_ms } => {
                let mut at = t;
                for i in 0..*count {
                    if i > 0 {
                        at += delay_ms;
                    }
                    self.draft.pop();
                    let event = InputEvent::erase(at as i64, 1, self.draft_len());
                    self.input(at, event).await?;
                }
                self.cursor = at;
            }
            Action::Pause { ms } => self.cursor = t + ms,
            Action::Mouse { path, interval_ms } => {
                let mut at = t;
                for (i, [x, y]) in path.iter().enumerate() {
                    if i > 0 {
                        at += interval_ms;
                    }
                    let event = InputEvent::mouse(at as i64, *x, *y, self.draft_len());
                    self.input(at, event).await?;
                }
                self.cursor = at;
            }
            Action::Submit => {
                self.sleep_until(t).await;
                let text: String = self.draft.drain(..).collect();
                self.send(ClientBody::Submit {
                    text,
                    client_ts_ms: t as i64,
                })
                .await?;
            }
            Action::SwitchIdentity { index } => {
                self.sleep_until(t).await;
                self.send(ClientBody::SwitchIdentity { identity_index: *index })
                    .await?;
            }
            Action::Annotate {
                message_seq,
                kind,
                text,
                value,
                study_internal,
            } => {
                self.sleep_until(t).await;
                let annotation = match kind {
                    AnnotateKind::Edit => AnnotationBody::Edit(text.clone().unwrap_or_default()),
                    AnnotateKind::Comment => AnnotationBody::Comment(text.clone().unwrap_or_default()),
                    AnnotateKind::Rating => AnnotationBody::Rating(value.unwrap_or_default()),
                };
                self.send(ClientBody::Annotate {
                    target_message_id: MessageId::for_seq(&self.target.session_id, *message_seq),
                    annotation,
                    study_internal: *study_internal,
                })
                .await?;
            }
            Action::SetIndicator { mode } => {
                self.sleep_until(t).await;
                self.send(ClientBody::SetIndicator { mode: *mode }).await?;
            }
            Action::WaitMessage {
                session_seq,
                timeout_ms,
            } => {
                self.sleep_until(t).await;
                let mut progress = self.conn.as_ref().expect("connected").progress.clone();
                let want = *session_seq;
                let reached = match tokio::time::timeout(
                    Duration::from_millis(*timeout_ms),
                    progress.wait_for(|p| p.max_session_seq >= want || p.closed),
                )
                .await
                {
                    Ok(Ok(p)) => p.max_session_seq >= want,
                    _ => false,
                };
                if !reached {
                    return Err(SimError::Timeout {
                        participant: self.script.name.clone(),
                        what: format!("message {want} not seen within {timeout_ms}ms"),
                    });
                }
                self.max_session_seq = self.max_session_seq.max(want);
                self.cursor = self.cursor.max(self.elapsed_ms().ceil() as u64);
            }
            Action::Disconnect { abrupt } => {
                self.sleep_until(t).await;
                self.hang_up(*abrupt).await;
            }
            Action::Reconnect => self.connect(t).await?,
        }
        Ok(())
    }

    /// Leaves with BYE and a close handshake, or just drops the socket.
    async fn hang_up(&mut self, abrupt: bool) {
        let Some(conn) = self.conn.as_ref() else {
            return;
        };
        let seen = conn.progress.borrow().max_session_seq;
        self.max_session_seq = self.max_session_seq.max(seen);
        if abrupt {
            let conn = self.conn.take().unwrap();
            conn.reader.abort();
            drop(conn.sink);
            let _ = conn.reader.await;
            self.note(Direction::Event, json!({"event": "dropped"}));
            return;
        }
        let _ = self.send(ClientBody::Bye).await;
        let mut conn = self.conn.take().unwrap();
        let _ = conn.sink.close().await;
        if tokio::time::timeout(Duration::from_secs(2), &mut conn.reader)
            .await
            .is_err()
        {
            conn.reader.abort();
        }
    }
}

impl ParticipantScript {
    /// The subset of [`ParticipantScript::check`] that needs no session config.
    fn check_kind_only(&self) -> Result<(), String> {
        let mut config = parley_core::SessionConfig::new("x", ChatMode::Sync);
        config.rating_scale_max = u32::MAX;
        self.check(&config)
    }
}
