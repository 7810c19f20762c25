//! Per-session state machine.
//!
//! Every operation validates its input, then commits one or more
//! [`EventRecord`]s. Committing a record runs the same `apply` step that log
//! replay uses, so a state rebuilt from the log is identical to the live one.
//! Outgoing frames are computed from each committed record with
//! [`visibility_filter`] for every connected participant.

use std::collections::BTreeMap;

use crate::model::{
    AnnotationBody, AnnotationId, ChatMode, EventPayload, EventRecord, IndicatorMode, InputAction,
    InputEvent, LeaveReason, Message, MessageId, Millis, Participant, ParticipantId,
    ParticipantKind, SessionConfig, SessionId, TypingIndicatorPolicy, TypingState,
    ValidationError, Annotation, apply_edits, validate_session_config,
};
use crate::telemetry::{summarize, EventWindow};
use crate::wire::{
    message_view, visibility_filter, ErrorCode, PeerRef, ServerBody, ServerFrame, SessionView,
    ViewLookup, Welcome,
};

/// Default interval at which the host re-evaluates typing indicators.
pub const DEFAULT_TICK_MS: u64 = 500;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EngineError {
    #[error("authentication failed")]
    AuthFailed,
    #[error("session is full")]
    SessionFull,
    #[error("session is closed")]
    SessionClosed,
    #[error("not permitted for this participant")]
    Forbidden,
    #[error("identity index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("participant is not connected")]
    NotConnected,
    #[error("malformed input event: {0}")]
    MalformedEvent(String),
    #[error("message is empty")]
    EmptyMessage,
    #[error("unknown message {0}")]
    UnknownMessage(MessageId),
    #[error("rating {got} outside 1..={max}")]
    RatingOutOfRange { got: u32, max: u32 },
    #[error("invalid indicator policy: {0:?}")]
    InvalidPolicy(Vec<ValidationError>),
}

impl EngineError {
    pub fn code(&self) -> ErrorCode {
        match self {
            Self::AuthFailed => ErrorCode::AuthFailed,
            Self::SessionFull => ErrorCode::SessionFull,
            Self::SessionClosed => ErrorCode::SessionClosed,
            Self::Forbidden => ErrorCode::Forbidden,
            Self::IndexOutOfRange(_) => ErrorCode::IndexOutOfRange,
            Self::NotConnected => ErrorCode::NotConnected,
            Self::MalformedEvent(_) => ErrorCode::MalformedEvent,
            Self::EmptyMessage => ErrorCode::EmptyMessage,
            Self::UnknownMessage(_) => ErrorCode::UnknownMessage,
            Self::RatingOutOfRange { .. } => ErrorCode::RatingOutOfRange,
            Self::InvalidPolicy(_) => ErrorCode::InvariantViolation,
        }
    }

    /// Only authentication-level failures end a connection.
    pub fn is_fatal(&self) -> bool {
        matches!(self, Self::AuthFailed | Self::SessionFull | Self::SessionClosed)
    }

    pub fn to_frame(&self) -> ServerFrame {
        ServerFrame {
            record_seq: 0,
            body: ServerBody::Error {
                code: self.code(),
                detail: self.to_string(),
                fatal: self.is_fatal(),
            },
        }
    }
}

/// A log that cannot be replayed, with the offending record.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("record {record_seq}: {reason}")]
pub struct ReplayError {
    pub record_seq: u64,
    pub reason: String,
}

/// Typing indicator for one author at `now_ts`.
///
/// `last_input_ts` is the server time of the author's most recent key event.
pub fn derive_typing_state(
    mode: IndicatorMode,
    idle_timeout_ms: u64,
    draft_len: u32,
    last_input_ts: Option<Millis>,
    now_ts: Millis,
) -> TypingState {
    let Some(last) = last_input_ts else {
        return TypingState::Idle;
    };
    if mode == IndicatorMode::Off || draft_len == 0 {
        return TypingState::Idle;
    }
    let idle_for = now_ts.saturating_sub(last);
    if idle_for < idle_timeout_ms as i64 {
        TypingState::Typing
    } else if mode == IndicatorMode::TypingAndPause {
        TypingState::Paused
    } else {
        TypingState::Idle
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RosterEntry {
    pub participant: Participant,
    pub connected: bool,
    pub draft_len: u32,
    /// Server time of the last key event.
    pub last_input_ts: Option<Millis>,
    /// Last client timestamp seen on this participant's stream.
    pub last_client_ts: Option<Millis>,
    /// Server clock minus client clock, measured at the latest join.
    pub clock_offset_ms: Millis,
    /// Input events since the previous submission.
    pub window: Vec<InputEvent>,
    /// Turn boundaries visible to this participant since the previous
    /// submission, on the participant's own clock.
    pub turn_anchors: Vec<Millis>,
}

impl RosterEntry {
    fn new(participant: Participant) -> Self {
        Self {
            participant,
            connected: false,
            draft_len: 0,
            last_input_ts: None,
            last_client_ts: None,
            clock_offset_ms: 0,
            window: Vec::new(),
            turn_anchors: Vec::new(),
        }
    }

    fn reset_stream(&mut self) {
        self.draft_len = 0;
        self.last_input_ts = None;
        self.last_client_ts = None;
        self.window.clear();
        self.turn_anchors.clear();
    }
}

/// Start of a telemetry window: the latest visible turn boundary that is not
/// after the first keystroke (or after the submission, if nothing was typed).
pub fn window_start(anchors: &[Millis], events: &[InputEvent], submit_ts: Millis) -> Millis {
    let reference = events
        .iter()
        .find(|e| e.action.is_key())
        .map_or(submit_ts, |e| e.client_ts_ms);
    anchors
        .iter()
        .copied()
        .filter(|&a| a <= reference)
        .max()
        .unwrap_or(reference)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub to: ParticipantId,
    pub frame: ServerFrame,
}

/// Records committed by one operation and the frames they produce.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Effects {
    pub records: Vec<EventRecord>,
    pub deliveries: Vec<Delivery>,
}

impl Effects {
    fn merge(&mut self, other: Effects) {
        self.records.extend(other.records);
        self.deliveries.extend(other.deliveries);
    }

    pub fn frames_for<'a>(&'a self, pid: &ParticipantId) -> impl Iterator<Item = &'a ServerFrame> + 'a {
        let pid = pid.clone();
        self.deliveries
            .iter()
            .filter(move |d| d.to == pid)
            .map(|d| &d.frame)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JoinOutcome {
    pub participant_id: ParticipantId,
    /// Set when the participant was already connected; the previous
    /// connection must be dropped.
    pub superseded: bool,
    pub welcome: ServerFrame,
    pub effects: Effects,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub config: SessionConfig,
    pub roster: BTreeMap<ParticipantId, RosterEntry>,
    pub typing_states: BTreeMap<ParticipantId, TypingState>,
    pub messages: Vec<Message>,
    pub next_record_seq: u64,
    pub closed: bool,
    pub annotation_count: u64,
    pub last_server_ts: Millis,
}

impl ViewLookup for SessionState {
    fn participant(&self, id: &ParticipantId) -> Option<&Participant> {
        self.roster.get(id).map(|e| &e.participant)
    }

    fn message(&self, id: &MessageId) -> Option<&Message> {
        self.message_index(id).map(|i| &self.messages[i])
    }

    fn policy(&self) -> &TypingIndicatorPolicy {
        &self.config.indicator_policy
    }
}

fn fail(record_seq: u64, reason: impl Into<String>) -> ReplayError {
    ReplayError {
        record_seq,
        reason: reason.into(),
    }
}

impl SessionState {
    /// Validates the configuration and roster and commits `SESSION_CREATED`.
    pub fn create(
        config: SessionConfig,
        roster: Vec<Participant>,
        now: Millis,
    ) -> Result<(Self, EventRecord), Vec<ValidationError>> {
        let mut errs = validate_session_config(&config).err().unwrap_or_default();
        let mut seen = std::collections::BTreeSet::new();
        for p in &roster {
            if let Err(e) = p.validate() {
                errs.push(e);
            }
            if !seen.insert(&p.participant_id) {
                errs.push(ValidationError::DuplicateParticipant(p.participant_id.clone()));
            }
        }
        if !errs.is_empty() {
            return Err(errs);
        }
        let record = EventRecord {
            record_seq: 1,
            session_id: config.session_id.clone(),
            server_ts_ms: now,
            payload: EventPayload::SessionCreated { config, roster },
        };
        let state = Self::from_created(&record).expect("validated above");
        Ok((state, record))
    }

    fn from_created(record: &EventRecord) -> Result<Self, ReplayError> {
        let EventPayload::SessionCreated { config, roster } = &record.payload else {
            return Err(fail(record.record_seq, "log must start with SESSION_CREATED"));
        };
        if record.record_seq != 1 {
            return Err(fail(record.record_seq, "SESSION_CREATED must be record 1"));
        }
        if record.session_id != config.session_id {
            return Err(fail(1, "session id mismatch"));
        }
        let mut state = Self {
            config: config.clone(),
            roster: BTreeMap::new(),
            typing_states: BTreeMap::new(),
            messages: Vec::new(),
            next_record_seq: 2,
            closed: false,
            annotation_count: 0,
            last_server_ts: record.server_ts_ms,
        };
        for p in roster {
            state
                .typing_states
                .insert(p.participant_id.clone(), TypingState::Idle);
            state
                .roster
                .insert(p.participant_id.clone(), RosterEntry::new(p.clone()));
        }
        Ok(state)
    }

    /// Rebuilds a session from its complete log.
    pub fn replay(records: &[EventRecord]) -> Result<Self, ReplayError> {
        let (first, rest) = records
            .split_first()
            .ok_or_else(|| fail(1, "empty log"))?;
        let mut state = Self::from_created(first)?;
        for rec in rest {
            state.apply(rec)?;
        }
        Ok(state)
    }

    pub fn session_id(&self) -> &SessionId {
        &self.config.session_id
    }

    pub fn mode(&self) -> ChatMode {
        self.config.mode
    }

    pub fn connected(&self) -> impl Iterator<Item = &ParticipantId> {
        self.roster
            .iter()
            .filter(|(_, e)| e.connected)
            .map(|(id, _)| id)
    }

    pub fn participant_by_token(&self, token: &str) -> Option<&Participant> {
        self.roster
            .values()
            .map(|e| &e.participant)
            .find(|p| p.token_digest.matches(token))
    }

    fn message_index(&self, id: &MessageId) -> Option<usize> {
        // ids encode the dense sequence; fall back to a scan for foreign ids
        self.messages
            .iter()
            .position(|m| &m.message_id == id)
    }

    fn entry(&self, pid: &ParticipantId) -> Result<&RosterEntry, EngineError> {
        match self.roster.get(pid) {
            Some(e) if e.connected => Ok(e),
            _ => Err(EngineError::NotConnected),
        }
    }

    fn ensure_open(&self) -> Result<(), EngineError> {
        if self.closed {
            Err(EngineError::SessionClosed)
        } else {
            Ok(())
        }
    }

    // -- apply ------------------------------------------------------------

    /// Folds one record into the state. Shared by live commits and replay.
    pub fn apply(&mut self, rec: &EventRecord) -> Result<(), ReplayError> {
        let seq = rec.record_seq;
        if seq != self.next_record_seq {
            return Err(fail(seq, format!("expected record {}", self.next_record_seq)));
        }
        if &rec.session_id != self.session_id() {
            return Err(fail(seq, "record belongs to another session"));
        }
        let ts = rec.server_ts_ms;
        match &rec.payload {
            EventPayload::SessionCreated { .. } => {
                return Err(fail(seq, "duplicate SESSION_CREATED"));
            }
            EventPayload::Join {
                participant_id,
                hello_client_ts_ms,
            } => {
                let e = self.entry_mut(seq, participant_id)?;
                if e.last_client_ts.is_some_and(|last| *hello_client_ts_ms < last) {
                    // client clock restarted: its earlier stream is unusable
                    e.reset_stream();
                }
                e.connected = true;
                e.clock_offset_ms = ts - hello_client_ts_ms;
                e.turn_anchors.push(*hello_client_ts_ms);
                e.last_client_ts = Some(e.last_client_ts.map_or(*hello_client_ts_ms, |l| l.max(*hello_client_ts_ms)));
            }
            EventPayload::Leave { participant_id, .. } => {
                self.entry_mut(seq, participant_id)?.connected = false;
                self.typing_states
                    .insert(participant_id.clone(), TypingState::Idle);
            }
            EventPayload::IdentitySwitch {
                participant_id,
                identity_index,
            } => {
                let e = self.entry_mut(seq, participant_id)?;
                if *identity_index >= e.participant.identities.len() {
                    return Err(fail(seq, "identity index out of range"));
                }
                e.participant.active_identity_index = *identity_index;
            }
            EventPayload::InputEvent {
                participant_id,
                event,
            } => {
                let e = self.entry_mut(seq, participant_id)?;
                e.draft_len = event.draft_len_after;
                e.last_client_ts = Some(event.client_ts_ms);
                if event.action.is_key() {
                    e.last_input_ts = Some(ts);
                }
                e.window.push(event.clone());
            }
            EventPayload::TypingState {
                participant_id,
                state,
            } => {
                self.entry_mut(seq, participant_id)?;
                self.typing_states.insert(participant_id.clone(), *state);
            }
            EventPayload::Message(m) => {
                if m.session_seq != self.messages.len() as u64 + 1 {
                    return Err(fail(seq, "message session_seq is not dense"));
                }
                if m.message_id != MessageId::for_seq(self.session_id(), m.session_seq) {
                    return Err(fail(seq, "unexpected message id"));
                }
                let author = self.entry_mut(seq, &m.author_participant_id)?;
                author.draft_len = 0;
                author.last_input_ts = None;
                author.last_client_ts = Some(m.submit_ts_client_ms);
                author.window.clear();
                author.turn_anchors = vec![m.submit_ts_client_ms];
                for (pid, e) in self.roster.iter_mut() {
                    if pid != &m.author_participant_id && e.connected {
                        e.turn_anchors.push(ts - e.clock_offset_ms);
                    }
                }
                self.messages.push(m.clone());
            }
            EventPayload::Annotation(a) => {
                self.entry_mut(seq, &a.author_participant_id)?;
                let idx = self
                    .message_index(&a.target_message_id)
                    .ok_or_else(|| fail(seq, "annotation targets unknown message"))?;
                let m = &mut self.messages[idx];
                m.annotations.push(a.clone());
                m.text_current = apply_edits(&m.text_original, &m.annotations);
                self.annotation_count += 1;
            }
            EventPayload::PolicyChanged { policy } => {
                self.config.indicator_policy = policy.clone();
                for (pid, state) in self.typing_states.iter_mut() {
                    if policy.mode_for(pid) == IndicatorMode::Off {
                        *state = TypingState::Idle;
                    }
                }
            }
            EventPayload::SessionClosed => self.closed = true,
        }
        self.next_record_seq += 1;
        self.last_server_ts = self.last_server_ts.max(ts);
        Ok(())
    }

    fn entry_mut(&mut self, seq: u64, pid: &ParticipantId) -> Result<&mut RosterEntry, ReplayError> {
        self.roster
            .get_mut(pid)
            .ok_or_else(|| fail(seq, format!("unknown participant {pid}")))
    }

    fn commit(&mut self, payload: EventPayload, now: Millis) -> Effects {
        let record = EventRecord {
            record_seq: self.next_record_seq,
            session_id: self.session_id().clone(),
            server_ts_ms: now.max(self.last_server_ts),
            payload,
        };
        self.apply(&record)
            .expect("operations only commit records that apply cleanly");
        let mode = self.mode();
        let deliveries = self
            .roster
            .values()
            .filter(|e| e.connected)
            .flat_map(|e| {
                visibility_filter(mode, &record, &e.participant, self)
                    .into_iter()
                    .map(|frame| Delivery {
                        to: e.participant.participant_id.clone(),
                        frame,
                    })
            })
            .collect();
        Effects {
            records: vec![record],
            deliveries,
        }
    }

    // -- operations -------------------------------------------------------

    pub fn welcome(&self, pid: &ParticipantId, record_seq: u64) -> Option<ServerFrame> {
        let me = &self.roster.get(pid)?.participant;
        let peers = self
            .roster
            .values()
            .filter(|e| e.connected && &e.participant.participant_id != pid)
            .map(|e| PeerRef::of(&e.participant, me))
            .collect();
        Some(ServerFrame {
            record_seq,
            body: ServerBody::Welcome(Welcome {
                participant_id: pid.clone(),
                kind: me.kind,
                identities: if me.kind.is_staff() {
                    me.identities.clone()
                } else {
                    vec![me.active_identity().clone()]
                },
                active_identity_index: if me.kind.is_staff() {
                    me.active_identity_index
                } else {
                    0
                },
                session: SessionView::of(&self.config, &self.config.indicator_policy, me),
                peers,
                messages: self.messages.iter().map(|m| message_view(m, me)).collect(),
            }),
        })
    }

    /// Admits the holder of `token`. A participant who is already connected
    /// resumes their slot; the old connection is marked superseded.
    pub fn join(
        &mut self,
        token: &str,
        hello_client_ts_ms: Millis,
        now: Millis,
    ) -> Result<JoinOutcome, EngineError> {
        self.ensure_open()?;
        let pid = self
            .participant_by_token(token)
            .ok_or(EngineError::AuthFailed)?
            .participant_id
            .clone();
        self.admit(pid, hello_client_ts_ms, now)
    }

    /// [`join`](Self::join) for a participant the host has already
    /// authenticated.
    pub fn admit(
        &mut self,
        pid: ParticipantId,
        hello_client_ts_ms: Millis,
        now: Millis,
    ) -> Result<JoinOutcome, EngineError> {
        self.ensure_open()?;
        if !self.roster.contains_key(&pid) {
            return Err(EngineError::AuthFailed);
        }
        let mut effects = Effects::default();
        let superseded = self.roster[&pid].connected;
        if superseded {
            effects.merge(self.commit(
                EventPayload::Leave {
                    participant_id: pid.clone(),
                    reason: LeaveReason::Superseded,
                },
                now,
            ));
        } else if self.connected().count() >= self.config.max_participants as usize {
            return Err(EngineError::SessionFull);
        }
        effects.merge(self.commit(
            EventPayload::Join {
                participant_id: pid.clone(),
                hello_client_ts_ms,
            },
            now,
        ));
        let join_seq = self.next_record_seq - 1;
        let welcome = self.welcome(&pid, join_seq).expect("participant exists");
        Ok(JoinOutcome {
            participant_id: pid,
            superseded,
            welcome,
            effects,
        })
    }

    pub fn leave(&mut self, pid: &ParticipantId, reason: LeaveReason, now: Millis) -> Effects {
        match self.roster.get(pid) {
            Some(e) if e.connected => self.commit(
                EventPayload::Leave {
                    participant_id: pid.clone(),
                    reason,
                },
                now,
            ),
            _ => Effects::default(),
        }
    }

    pub fn switch_identity(
        &mut self,
        pid: &ParticipantId,
        identity_index: usize,
        now: Millis,
    ) -> Result<Effects, EngineError> {
        self.ensure_open()?;
        let e = self.entry(pid)?;
        if !e.participant.kind.is_staff() {
            return Err(EngineError::Forbidden);
        }
        if identity_index >= e.participant.identities.len() {
            return Err(EngineError::IndexOutOfRange(identity_index));
        }
        Ok(self.commit(
            EventPayload::IdentitySwitch {
                participant_id: pid.clone(),
                identity_index,
            },
            now,
        ))
    }

    pub fn ingest_input(
        &mut self,
        pid: &ParticipantId,
        event: InputEvent,
        now: Millis,
    ) -> Result<Effects, EngineError> {
        self.ensure_open()?;
        let e = self.entry(pid)?;
        event
            .check_payload()
            .map_err(|m| EngineError::MalformedEvent(m.into()))?;
        if e.last_client_ts.is_some_and(|last| event.client_ts_ms < last) {
            return Err(EngineError::MalformedEvent(
                "client_ts_ms went backwards".into(),
            ));
        }
        if matches!(event.action, InputAction::KeyErase { .. }) && e.draft_len == 0 {
            return Err(EngineError::MalformedEvent("erase on an empty draft".into()));
        }
        let expected = event.draft_len_from(e.draft_len);
        if event.draft_len_after != expected {
            return Err(EngineError::MalformedEvent(format!(
                "draft_len_after {} but expected {expected}",
                event.draft_len_after
            )));
        }
        let mut effects = self.commit(
            EventPayload::InputEvent {
                participant_id: pid.clone(),
                event,
            },
            now,
        );
        let ts = self.last_server_ts;
        effects.merge(self.refresh_typing_state(pid, ts));
        Ok(effects)
    }

    fn refresh_typing_state(&mut self, pid: &ParticipantId, now: Millis) -> Effects {
        let e = &self.roster[pid];
        let policy = &self.config.indicator_policy;
        let next = derive_typing_state(
            policy.mode_for(pid),
            policy.idle_timeout_ms,
            e.draft_len,
            e.last_input_ts,
            now,
        );
        if self.typing_states.get(pid) == Some(&next) {
            return Effects::default();
        }
        self.commit(
            EventPayload::TypingState {
                participant_id: pid.clone(),
                state: next,
            },
            now,
        )
    }

    /// Re-evaluates every connected participant's typing indicator.
    pub fn tick(&mut self, now: Millis) -> Effects {
        if self.closed {
            return Effects::default();
        }
        let now = now.max(self.last_server_ts);
        let pids: Vec<ParticipantId> = self.connected().cloned().collect();
        let mut effects = Effects::default();
        for pid in pids {
            effects.merge(self.refresh_typing_state(&pid, now));
        }
        effects
    }

    pub fn submit_message(
        &mut self,
        pid: &ParticipantId,
        draft_text: &str,
        client_ts_ms: Millis,
        now: Millis,
    ) -> Result<Effects, EngineError> {
        self.ensure_open()?;
        let e = self.entry(pid)?;
        let text = draft_text.trim_end_matches(['\n', '\r']);
        if text.is_empty() {
            return Err(EngineError::EmptyMessage);
        }
        if e.last_client_ts.is_some_and(|last| client_ts_ms < last) {
            return Err(EngineError::MalformedEvent(
                "submit client_ts_ms precedes earlier input".into(),
            ));
        }
        let start = window_start(&e.turn_anchors, &e.window, client_ts_ms);
        let window = EventWindow::new(e.window.clone(), start, client_ts_ms)
            .map_err(|w| EngineError::MalformedEvent(w.to_string()))?;
        let session_seq = self.messages.len() as u64 + 1;
        let message = Message {
            message_id: MessageId::for_seq(self.session_id(), session_seq),
            session_seq,
            author_participant_id: pid.clone(),
            author_identity: e.participant.active_identity().clone(),
            text_original: text.to_owned(),
            text_current: text.to_owned(),
            submit_ts_client_ms: client_ts_ms,
            submit_ts_server_ms: now.max(self.last_server_ts),
            telemetry: summarize(&window, text),
            annotations: Vec::new(),
        };
        let mut effects = self.commit(EventPayload::Message(message), now);
        let ts = self.last_server_ts;
        effects.merge(self.refresh_typing_state(pid, ts));
        Ok(effects)
    }

    pub fn annotate(
        &mut self,
        pid: &ParticipantId,
        target: &MessageId,
        body: AnnotationBody,
        study_internal: Option<bool>,
        now: Millis,
    ) -> Result<Effects, EngineError> {
        self.ensure_open()?;
        let e = self.entry(pid)?;
        if self.message_index(target).is_none() {
            return Err(EngineError::UnknownMessage(target.clone()));
        }
        match &body {
            AnnotationBody::Rating(r) if *r < 1 || *r > self.config.rating_scale_max => {
                return Err(EngineError::RatingOutOfRange {
                    got: *r,
                    max: self.config.rating_scale_max,
                });
            }
            AnnotationBody::Edit(_) if !e.participant.kind.is_staff() => {
                return Err(EngineError::Forbidden);
            }
            AnnotationBody::Edit(text) if text.is_empty() => {
                return Err(EngineError::EmptyMessage);
            }
            _ => {}
        }
        let annotation = Annotation {
            annotation_id: AnnotationId::for_seq(self.session_id(), self.annotation_count + 1),
            author_participant_id: pid.clone(),
            target_message_id: target.clone(),
            ts_server_ms: now.max(self.last_server_ts),
            study_internal: study_internal.unwrap_or_else(|| body.default_study_internal()),
            body,
        };
        Ok(self.commit(EventPayload::Annotation(annotation), now))
    }

    /// A leader sets the session default; anyone else sets their own
    /// override unless the leader has locked the policy.
    pub fn set_indicator(
        &mut self,
        pid: &ParticipantId,
        mode: IndicatorMode,
        now: Millis,
    ) -> Result<Effects, EngineError> {
        self.ensure_open()?;
        let e = self.entry(pid)?;
        let mut policy = self.config.indicator_policy.clone();
        if e.participant.kind == ParticipantKind::Leader {
            policy.session_default = mode;
        } else if policy.leader_locked {
            return Err(EngineError::Forbidden);
        } else {
            policy.per_participant_overrides.insert(pid.clone(), mode);
        }
        self.update_policy(policy, now)
    }

    pub fn update_policy(
        &mut self,
        policy: TypingIndicatorPolicy,
        now: Millis,
    ) -> Result<Effects, EngineError> {
        self.ensure_open()?;
        let errs = policy.violations();
        if !errs.is_empty() {
            return Err(EngineError::InvalidPolicy(errs));
        }
        Ok(self.commit(EventPayload::PolicyChanged { policy }, now))
    }

    /// Closes the session to further input. Connected participants stay
    /// connected until the host disconnects them.
    pub fn close(&mut self, now: Millis) -> Effects {
        if self.closed {
            return Effects::default();
        }
        self.commit(EventPayload::SessionClosed, now)
    }
}

/// First point where a re-driven log departs from the original.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("record {record_seq}: {reason}")]
pub struct Divergence {
    pub record_seq: u64,
    pub reason: String,
}

fn diverged(record_seq: u64, reason: impl Into<String>) -> Divergence {
    Divergence {
        record_seq,
        reason: reason.into(),
    }
}

/// Re-executes every logged operation against a fresh engine, with the
/// logged server timestamps as the clock, and checks that the engine commits
/// exactly the logged records. `TYPING_STATE` records that no operation
/// produced are reproduced by a tick at their timestamp.
///
/// Unlike [`SessionState::replay`], which folds records as given, this
/// recomputes every derived field (telemetry, ids, typing states). Returns
/// the resulting state and the records the fresh engine committed.
pub fn redrive(records: &[EventRecord]) -> Result<(SessionState, Vec<EventRecord>), Divergence> {
    let first = records.first().ok_or_else(|| diverged(1, "empty log"))?;
    let EventPayload::SessionCreated { config, roster } = &first.payload else {
        return Err(diverged(first.record_seq, "log does not start with SESSION_CREATED"));
    };
    let (mut state, created) = SessionState::create(config.clone(), roster.clone(), first.server_ts_ms)
        .map_err(|e| diverged(first.record_seq, format!("invalid session: {e:?}")))?;
    if created != *first {
        return Err(diverged(first.record_seq, "SESSION_CREATED differs"));
    }
    let mut committed = vec![created];
    let mut i = 1;
    while i < records.len() {
        let rec = &records[i];
        let now = rec.server_ts_ms;
        let produced = match &rec.payload {
            EventPayload::SessionCreated { .. } => {
                return Err(diverged(rec.record_seq, "second SESSION_CREATED"))
            }
            EventPayload::Join {
                participant_id,
                hello_client_ts_ms,
            } => state
                .admit(participant_id.clone(), *hello_client_ts_ms, now)
                .map(|o| o.effects),
            EventPayload::Leave {
                participant_id,
                reason,
            } => Ok(state.leave(participant_id, *reason, now)),
            EventPayload::IdentitySwitch {
                participant_id,
                identity_index,
            } => state.switch_identity(participant_id, *identity_index, now),
            EventPayload::InputEvent {
                participant_id,
                event,
            } => state.ingest_input(participant_id, event.clone(), now),
            EventPayload::TypingState { .. } => Ok(state.tick(now)),
            EventPayload::Message(m) => state.submit_message(
                &m.author_participant_id,
                &m.text_original,
                m.submit_ts_client_ms,
                now,
            ),
            EventPayload::Annotation(a) => state.annotate(
                &a.author_participant_id,
                &a.target_message_id,
                a.body.clone(),
                Some(a.study_internal),
                now,
            ),
            EventPayload::PolicyChanged { policy } => state.update_policy(policy.clone(), now),
            EventPayload::SessionClosed => Ok(state.close(now)),
        }
        .map_err(|e| diverged(rec.record_seq, format!("engine rejected the operation: {e}")))?
        .records;
        if produced.is_empty() {
            return Err(diverged(rec.record_seq, "engine committed nothing"));
        }
        for (k, p) in produced.iter().enumerate() {
            match records.get(i + k) {
                Some(orig) if orig == p => {}
                Some(orig) => {
                    return Err(diverged(
                        orig.record_seq,
                        format!("engine committed {:?}", p.payload.kind()),
                    ))
                }
                None => return Err(diverged(p.record_seq, "engine committed past the end of the log")),
            }
        }
        i += produced.len();
        committed.extend(produced);
    }
    Ok((state, committed))
}
