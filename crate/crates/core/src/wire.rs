//! Client/server frames, their canonical encoding, and the per-viewer
//! visibility rules that turn log records into outgoing frames.
//!
//! Every frame is a JSON object with a schema version `v`, a `kind`
//! discriminator and a kind-specific `body`. The canonical form has sorted
//! keys and no insignificant whitespace, so two equal frames always encode to
//! the same bytes. Log records use the same encoding with `payload` in place
//! of `body`.

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::model::{
    apply_edits, Annotation, AnnotationBody, AnnotationId, ChatMode, EventKind, EventPayload,
    EventRecord, Identity, IndicatorMode, InputAction, InputEvent, Message, MessageId, Millis,
    Participant, ParticipantId, ParticipantKind, SessionConfig, SessionId, TypingIndicatorPolicy,
    TypingState,
};

pub const PROTOCOL_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("MALFORMED: {0}")]
    Malformed(String),
    #[error("UNKNOWN_KIND: {0}")]
    UnknownKind(String),
    #[error("INVARIANT_VIOLATION: {0}")]
    InvariantViolation(String),
}

impl DecodeError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::Malformed(_) => "MALFORMED",
            Self::UnknownKind(_) => "UNKNOWN_KIND",
            Self::InvariantViolation(_) => "INVARIANT_VIOLATION",
        }
    }
}

// ---------------------------------------------------------------------------
// Frames

#[derive(Debug, Clone, PartialEq)]
pub struct ClientFrame {
    pub client_seq: u64,
    pub body: ClientBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ClientBody {
    Hello {
        session_id: SessionId,
        token: String,
        client_ts_ms: Millis,
    },
    Input {
        event: InputEvent,
    },
    Submit {
        text: String,
        client_ts_ms: Millis,
    },
    SwitchIdentity {
        identity_index: usize,
    },
    Annotate {
        target_message_id: MessageId,
        annotation: AnnotationBody,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        study_internal: Option<bool>,
    },
    SetIndicator {
        mode: IndicatorMode,
    },
    Bye,
}

impl ClientBody {
    pub const KINDS: [&'static str; 7] = [
        "HELLO",
        "INPUT",
        "SUBMIT",
        "SWITCH_IDENTITY",
        "ANNOTATE",
        "SET_INDICATOR",
        "BYE",
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerFrame {
    /// Sequence of the log record this frame reflects. `ERROR` frames carry 0.
    pub record_seq: u64,
    pub body: ServerBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ServerBody {
    Welcome(Welcome),
    PeerJoined {
        peer: PeerRef,
    },
    PeerLeft {
        peer: PeerRef,
    },
    TypingState {
        peer: PeerRef,
        state: TypingState,
    },
    PeerKeystroke {
        peer: PeerRef,
        input: InputAction,
        draft_len_after: u32,
    },
    MessagePosted {
        message: MessageView,
    },
    MessageUpdated {
        message: MessageView,
    },
    IndicatorChanged {
        indicator: IndicatorView,
    },
    Error {
        code: ErrorCode,
        detail: String,
        fatal: bool,
    },
}

impl ServerBody {
    pub const KINDS: [&'static str; 9] = [
        "WELCOME",
        "PEER_JOINED",
        "PEER_LEFT",
        "TYPING_STATE",
        "PEER_KEYSTROKE",
        "MESSAGE_POSTED",
        "MESSAGE_UPDATED",
        "INDICATOR_CHANGED",
        "ERROR",
    ];

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Welcome(_) => "WELCOME",
            Self::PeerJoined { .. } => "PEER_JOINED",
            Self::PeerLeft { .. } => "PEER_LEFT",
            Self::TypingState { .. } => "TYPING_STATE",
            Self::PeerKeystroke { .. } => "PEER_KEYSTROKE",
            Self::MessagePosted { .. } => "MESSAGE_POSTED",
            Self::MessageUpdated { .. } => "MESSAGE_UPDATED",
            Self::IndicatorChanged { .. } => "INDICATOR_CHANGED",
            Self::Error { .. } => "ERROR",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    AuthFailed,
    SessionFull,
    SessionClosed,
    UnknownSession,
    Forbidden,
    IndexOutOfRange,
    NotConnected,
    MalformedEvent,
    EmptyMessage,
    UnknownMessage,
    RatingOutOfRange,
    SeqRegression,
    ProtocolViolation,
    Malformed,
    UnknownKind,
    InvariantViolation,
    Backpressure,
    Internal,
}

impl From<&DecodeError> for ErrorCode {
    fn from(e: &DecodeError) -> Self {
        match e {
            DecodeError::Malformed(_) => Self::Malformed,
            DecodeError::UnknownKind(_) => Self::UnknownKind,
            DecodeError::InvariantViolation(_) => Self::InvariantViolation,
        }
    }
}

/// How one participant appears to another. The real participant id is only
/// filled in for staff viewers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerRef {
    pub identity: Identity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub participant_id: Option<ParticipantId>,
}

impl PeerRef {
    pub fn of(p: &Participant, viewer: &Participant) -> Self {
        Self {
            identity: p.active_identity().clone(),
            participant_id: viewer
                .kind
                .is_staff()
                .then(|| p.participant_id.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationView {
    pub annotation_id: AnnotationId,
    pub annotation: AnnotationBody,
    pub ts_server_ms: Millis,
    pub study_internal: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub author_participant_id: Option<ParticipantId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageView {
    pub message_id: MessageId,
    pub session_seq: u64,
    pub author: PeerRef,
    /// Text with every edit the viewer may see applied.
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_original: Option<String>,
    pub edited: bool,
    pub submit_ts_server_ms: Millis,
    pub annotations: Vec<AnnotationView>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndicatorView {
    pub session_default: IndicatorMode,
    pub idle_timeout_ms: u64,
    pub leader_locked: bool,
    /// The viewer's own effective indicator mode.
    pub own_mode: IndicatorMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overrides: Option<BTreeMap<ParticipantId, IndicatorMode>>,
}

impl IndicatorView {
    pub fn of(policy: &TypingIndicatorPolicy, viewer: &Participant) -> Self {
        Self {
            session_default: policy.session_default,
            idle_timeout_ms: policy.idle_timeout_ms,
            leader_locked: policy.leader_locked,
            own_mode: policy.mode_for(&viewer.participant_id),
            overrides: viewer
                .kind
                .is_staff()
                .then(|| policy.per_participant_overrides.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: SessionId,
    pub title: String,
    pub mode: ChatMode,
    pub rating_scale_max: u32,
    pub mouse_sample_interval_ms: u64,
    pub indicator: IndicatorView,
}

impl SessionView {
    pub fn of(cfg: &SessionConfig, policy: &TypingIndicatorPolicy, viewer: &Participant) -> Self {
        Self {
            session_id: cfg.session_id.clone(),
            title: cfg.title.clone(),
            mode: cfg.mode,
            rating_scale_max: cfg.rating_scale_max,
            mouse_sample_interval_ms: cfg.mouse_sample_interval_ms,
            indicator: IndicatorView::of(policy, viewer),
        }
    }
}

/// First frame on a connection: the session as this participant sees it,
/// including the full durable message history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Welcome {
    pub participant_id: ParticipantId,
    pub kind: ParticipantKind,
    pub identities: Vec<Identity>,
    pub active_identity_index: usize,
    pub session: SessionView,
    pub peers: Vec<PeerRef>,
    pub messages: Vec<MessageView>,
}

// ---------------------------------------------------------------------------
// Canonical encoding

fn write_canonical(v: &Value, out: &mut String) {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_canonical(&map[k], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        scalar => out.push_str(&scalar.to_string()),
    }
}

/// Sorted keys, no whitespace.
pub fn canonical_json(v: &Value) -> String {
    let mut out = String::new();
    write_canonical(v, &mut out);
    out
}

fn to_object<T: Serialize>(v: &T) -> Map<String, Value> {
    match serde_json::to_value(v).expect("domain types serialize infallibly") {
        Value::Object(m) => m,
        other => unreachable!("tagged enums serialize to objects, got {other}"),
    }
}

fn parse_object(bytes: &[u8]) -> Result<Map<String, Value>, DecodeError> {
    if bytes.is_empty() {
        return Err(DecodeError::Malformed("empty input".into()));
    }
    match serde_json::from_slice::<Value>(bytes) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(DecodeError::Malformed("frame is not a JSON object".into())),
        Err(e) => Err(DecodeError::Malformed(e.to_string())),
    }
}

fn take_version(map: &mut Map<String, Value>) -> Result<(), DecodeError> {
    match map.remove("v") {
        Some(Value::Number(n)) if n.as_u64() == Some(PROTOCOL_VERSION) => Ok(()),
        Some(other) => Err(DecodeError::InvariantViolation(format!(
            "unsupported schema version {other}"
        ))),
        None => Err(DecodeError::Malformed("missing field `v`".into())),
    }
}

fn check_kind(map: &Map<String, Value>, known: &[&str]) -> Result<(), DecodeError> {
    match map.get("kind") {
        Some(Value::String(k)) if known.contains(&k.as_str()) => Ok(()),
        Some(Value::String(k)) => Err(DecodeError::UnknownKind(k.clone())),
        Some(_) => Err(DecodeError::Malformed("`kind` must be a string".into())),
        None => Err(DecodeError::Malformed("missing field `kind`".into())),
    }
}

fn take_u64(map: &mut Map<String, Value>, field: &str) -> Result<u64, DecodeError> {
    map.remove(field)
        .and_then(|v| v.as_u64())
        .ok_or_else(|| DecodeError::Malformed(format!("missing or non-integer `{field}`")))
}

fn only_fields(map: &Map<String, Value>, allowed: &[&str]) -> Result<(), DecodeError> {
    match map.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(DecodeError::Malformed(format!("unexpected field `{k}`"))),
        None => Ok(()),
    }
}

fn from_object<T: DeserializeOwned>(map: Map<String, Value>) -> Result<T, DecodeError> {
    serde_json::from_value(Value::Object(map)).map_err(|e| DecodeError::Malformed(e.to_string()))
}

/// Anything that travels or is stored in the canonical encoding.
pub trait WireFrame: Sized {
    fn to_json(&self) -> Value;
    fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError>;

    fn to_canonical_string(&self) -> String {
        canonical_json(&self.to_json())
    }
}

pub fn encode_frame<F: WireFrame>(frame: &F) -> Vec<u8> {
    frame.to_canonical_string().into_bytes()
}

pub fn decode_frame<F: WireFrame>(bytes: &[u8]) -> Result<F, DecodeError> {
    F::from_bytes(bytes)
}

impl WireFrame for ClientFrame {
    fn to_json(&self) -> Value {
        let mut m = to_object(&self.body);
        m.insert("v".into(), PROTOCOL_VERSION.into());
        m.insert("client_seq".into(), self.client_seq.into());
        Value::Object(m)
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut m = parse_object(bytes)?;
        check_kind(&m, &ClientBody::KINDS)?;
        take_version(&mut m)?;
        let client_seq = take_u64(&mut m, "client_seq")?;
        only_fields(&m, &["kind", "body"])?;
        let body: ClientBody = from_object(m)?;
        if client_seq == 0 {
            return Err(DecodeError::InvariantViolation(
                "client_seq must be positive".into(),
            ));
        }
        if let ClientBody::Input { event } = &body {
            event
                .check_payload()
                .map_err(|e| DecodeError::InvariantViolation(e.into()))?;
        }
        Ok(Self { client_seq, body })
    }
}

impl WireFrame for ServerFrame {
    fn to_json(&self) -> Value {
        let mut m = to_object(&self.body);
        m.insert("v".into(), PROTOCOL_VERSION.into());
        m.insert("record_seq".into(), self.record_seq.into());
        Value::Object(m)
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut m = parse_object(bytes)?;
        check_kind(&m, &ServerBody::KINDS)?;
        take_version(&mut m)?;
        let record_seq = take_u64(&mut m, "record_seq")?;
        only_fields(&m, &["kind", "body"])?;
        let body: ServerBody = from_object(m)?;
        let is_error = matches!(body, ServerBody::Error { .. });
        if record_seq == 0 && !is_error {
            return Err(DecodeError::InvariantViolation(
                "record_seq must be positive".into(),
            ));
        }
        Ok(Self { record_seq, body })
    }
}

fn event_kind_names() -> Vec<String> {
    EventKind::ALL
        .iter()
        .map(|k| serde_json::to_value(k).unwrap().as_str().unwrap().to_owned())
        .collect()
}

impl WireFrame for EventRecord {
    fn to_json(&self) -> Value {
        let mut m = to_object(self);
        m.insert("v".into(), PROTOCOL_VERSION.into());
        Value::Object(m)
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut m = parse_object(bytes)?;
        let names = event_kind_names();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        check_kind(&m, &names)?;
        take_version(&mut m)?;
        only_fields(
            &m,
            &["kind", "payload", "record_seq", "session_id", "server_ts_ms"],
        )?;
        let rec: EventRecord = from_object(m)?;
        if rec.record_seq == 0 {
            return Err(DecodeError::InvariantViolation(
                "record_seq must be positive".into(),
            ));
        }
        Ok(rec)
    }
}

// ---------------------------------------------------------------------------
// Visibility

/// Read access to the session state a record is rendered against. The state
/// must already include the record.
pub trait ViewLookup {
    fn participant(&self, id: &ParticipantId) -> Option<&Participant>;
    fn message(&self, id: &MessageId) -> Option<&Message>;
    fn policy(&self) -> &TypingIndicatorPolicy;
}

fn annotation_visible(a: &Annotation, viewer: &Participant) -> bool {
    !a.study_internal || viewer.kind.is_staff() || a.author_participant_id == viewer.participant_id
}

/// Renders a message for one viewer: study-internal annotations are hidden
/// from non-staff viewers unless they wrote them.
pub fn message_view(m: &Message, viewer: &Participant) -> MessageView {
    let staff = viewer.kind.is_staff();
    let visible: Vec<&Annotation> = m
        .annotations_in_order()
        .filter(|a| annotation_visible(a, viewer))
        .collect();
    let text = apply_edits(&m.text_original, visible.iter().copied());
    let edited = visible
        .iter()
        .any(|a| matches!(a.body, AnnotationBody::Edit(_)));
    MessageView {
        message_id: m.message_id.clone(),
        session_seq: m.session_seq,
        author: PeerRef {
            identity: m.author_identity.clone(),
            participant_id: staff.then(|| m.author_participant_id.clone()),
        },
        text,
        text_original: staff.then(|| m.text_original.clone()),
        edited,
        submit_ts_server_ms: m.submit_ts_server_ms,
        annotations: visible
            .into_iter()
            .map(|a| AnnotationView {
                annotation_id: a.annotation_id.clone(),
                annotation: a.body.clone(),
                ts_server_ms: a.ts_server_ms,
                study_internal: a.study_internal,
                author_participant_id: (staff || a.author_participant_id == viewer.participant_id)
                    .then(|| a.author_participant_id.clone()),
            })
            .collect(),
    }
}

/// Frames `viewer` receives for `record` in a session running in `mode`.
///
/// Drafts: a participant's own input is never echoed; other participants'
/// keystrokes become `PEER_KEYSTROKE` only in synchronous mode. Typing
/// indicators travel as their own `TYPING_STATE` records. Identity switches
/// produce no frame for anyone.
pub fn visibility_filter(
    mode: ChatMode,
    record: &EventRecord,
    viewer: &Participant,
    lookup: &impl ViewLookup,
) -> Vec<ServerFrame> {
    let me = &viewer.participant_id;
    let peer = |pid: &ParticipantId| lookup.participant(pid).map(|p| PeerRef::of(p, viewer));
    let body = match &record.payload {
        EventPayload::SessionCreated { .. }
        | EventPayload::IdentitySwitch { .. }
        | EventPayload::SessionClosed => None,
        EventPayload::Join { participant_id, .. } if participant_id != me => {
            peer(participant_id).map(|peer| ServerBody::PeerJoined { peer })
        }
        EventPayload::Leave { participant_id, .. } if participant_id != me => {
            peer(participant_id).map(|peer| ServerBody::PeerLeft { peer })
        }
        EventPayload::Join { .. } | EventPayload::Leave { .. } => None,
        EventPayload::InputEvent {
            participant_id,
            event,
        } => {
            if participant_id == me || mode != ChatMode::Sync || !event.action.is_key() {
                None
            } else {
                peer(participant_id).map(|peer| ServerBody::PeerKeystroke {
                    peer,
                    input: event.action.clone(),
                    draft_len_after: event.draft_len_after,
                })
            }
        }
        EventPayload::TypingState {
            participant_id,
            state,
        } if participant_id != me => peer(participant_id).map(|peer| ServerBody::TypingState {
            peer,
            state: *state,
        }),
        EventPayload::TypingState { .. } => None,
        EventPayload::Message(m) => Some(ServerBody::MessagePosted {
            message: message_view(m, viewer),
        }),
        EventPayload::Annotation(a) => {
            if annotation_visible(a, viewer) {
                lookup
                    .message(&a.target_message_id)
                    .map(|m| ServerBody::MessageUpdated {
                        message: message_view(m, viewer),
                    })
            } else {
                None
            }
        }
        EventPayload::PolicyChanged { policy } => Some(ServerBody::IndicatorChanged {
            indicator: IndicatorView::of(policy, viewer),
        }),
    };
    body.map(|body| ServerFrame {
        record_seq: record.record_seq,
        body,
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Identity, TelemetrySummary};

    fn frame(seq: u64, body: ClientBody) -> ClientFrame {
        ClientFrame {
            client_seq: seq,
            body,
        }
    }

    #[test]
    fn bye_has_fixed_bytes() {
        let bytes = encode_frame(&frame(3, ClientBody::Bye));
        assert_eq!(
            std::str::from_utf8(&bytes).unwrap(),
            r#"{"client_seq":3,"kind":"BYE","v":1}"#
        );
    }

    #[test]
    fn canonical_keys_sorted_without_whitespace() {
        let f = frame(
            1,
            ClientBody::Hello {
                session_id: "s1".into(),
                token: "tok".into(),
                client_ts_ms: 0,
            },
        );
        assert_eq!(
            f.to_canonical_string(),
            r#"{"body":{"client_ts_ms":0,"session_id":"s1","token":"tok"},"client_seq":1,"kind":"HELLO","v":1}"#
        );
    }

    #[test]
    fn decode_accepts_non_canonical_whitespace() {
        let f: ClientFrame =
            decode_frame(br#"{ "v": 1, "kind": "BYE", "client_seq": 2 }"#).unwrap();
        assert_eq!(f, frame(2, ClientBody::Bye));
    }

    #[test]
    fn decode_errors() {
        let err = |b: &[u8]| decode_frame::<ClientFrame>(b).unwrap_err().code();
        assert_eq!(err(b""), "MALFORMED");
        assert_eq!(err(b"not json"), "MALFORMED");
        assert_eq!(err(b"[1,2]"), "MALFORMED");
        assert_eq!(err(br#"{"v":1,"client_seq":1}"#), "MALFORMED");
        assert_eq!(err(br#"{"v":1,"kind":"XYZZY","client_seq":1}"#), "UNKNOWN_KIND");
        assert_eq!(err(br#"{"v":1,"kind":"BYE","client_seq":0}"#), "INVARIANT_VIOLATION");
        assert_eq!(err(br#"{"v":2,"kind":"BYE","client_seq":1}"#), "INVARIANT_VIOLATION");
        assert_eq!(err(br#"{"v":1,"kind":"BYE","client_seq":1,"x":0}"#), "MALFORMED");
        assert_eq!(
            err(br#"{"v":1,"kind":"SUBMIT","client_seq":1,"body":{"text":7}}"#),
            "MALFORMED"
        );
        assert_eq!(
            err(br#"{"v":1,"kind":"INPUT","client_seq":1,"body":{"event":{"action":{"kind":"KEY_DOWN","payload":{"chars":0}},"client_ts_ms":0,"draft_len_after":0}}}"#),
            "INVARIANT_VIOLATION"
        );
    }

    #[test]
    fn server_frames_need_positive_seq_except_errors() {
        let err = ServerFrame {
            record_seq: 0,
            body: ServerBody::Error {
                code: ErrorCode::SeqRegression,
                detail: "late".into(),
                fatal: false,
            },
        };
        assert_eq!(decode_frame::<ServerFrame>(&encode_frame(&err)).unwrap(), err);
        let bad = br#"{"v":1,"kind":"PEER_LEFT","record_seq":0,"body":{"peer":{"identity":{"display_name":"A","role_label":"","presented_as_machine":false}}}}"#;
        assert_eq!(
            decode_frame::<ServerFrame>(bad).unwrap_err().code(),
            "INVARIANT_VIOLATION"
        );
    }

    #[test]
    fn record_round_trip_keeps_floats_exact() {
        let m = Message {
            message_id: "s-m00000001".into(),
            session_seq: 1,
            author_participant_id: "p".into(),
            author_identity: Identity::new("A", "r"),
            text_original: "hi".into(),
            text_current: "hi".into(),
            submit_ts_client_ms: 5,
            submit_ts_server_ms: 6,
            telemetry: TelemetrySummary {
                speed_cps: 0.1 + 0.2,
                iki_cv: Some(1.0 / 3.0),
                ..Default::default()
            },
            annotations: vec![],
        };
        let rec = EventRecord {
            record_seq: 4,
            session_id: "s".into(),
            server_ts_ms: 99,
            payload: EventPayload::Message(m),
        };
        let bytes = encode_frame(&rec);
        assert_eq!(decode_frame::<EventRecord>(&bytes).unwrap(), rec);
        let closed = EventRecord {
            payload: EventPayload::SessionClosed,
            ..rec
        };
        let bytes = encode_frame(&closed);
        assert_eq!(decode_frame::<EventRecord>(&bytes).unwrap(), closed);
    }

    struct Lookup {
        people: Vec<Participant>,
        messages: Vec<Message>,
        policy: TypingIndicatorPolicy,
    }

    impl ViewLookup for Lookup {
        fn participant(&self, id: &ParticipantId) -> Option<&Participant> {
            self.people.iter().find(|p| &p.participant_id == id)
        }
        fn message(&self, id: &MessageId) -> Option<&Message> {
            self.messages.iter().find(|m| &m.message_id == id)
        }
        fn policy(&self) -> &TypingIndicatorPolicy {
            &self.policy
        }
    }

    fn lookup() -> Lookup {
        Lookup {
            people: vec![
                Participant::new("subj", "t1", ParticipantKind::Subject, vec![Identity::new("Sam", "customer")]),
                Participant::new(
                    "wiz",
                    "t2",
                    ParticipantKind::Wizard,
                    vec![Identity::new("Ava", "insurance agent"), Identity::new("Bot", "computer").machine()],
                ),
            ],
            messages: vec![],
            policy: TypingIndicatorPolicy::uniform(IndicatorMode::Off, 3000),
        }
    }

    fn key_record(author: &str) -> EventRecord {
        EventRecord {
            record_seq: 7,
            session_id: "s".into(),
            server_ts_ms: 0,
            payload: EventPayload::InputEvent {
                participant_id: author.into(),
                event: InputEvent::typed(10, "h", 1),
            },
        }
    }

    #[test]
    fn quasi_sync_peer_keystroke_is_invisible() {
        let l = lookup();
        let viewer = &l.people[0];
        assert!(visibility_filter(ChatMode::QuasiSync, &key_record("wiz"), viewer, &l).is_empty());
    }

    #[test]
    fn sync_peer_keystroke_is_relayed() {
        let l = lookup();
        let frames = visibility_filter(ChatMode::Sync, &key_record("wiz"), &l.people[0], &l);
        assert_eq!(frames.len(), 1);
        match &frames[0].body {
            ServerBody::PeerKeystroke { peer, input, draft_len_after } => {
                assert_eq!(peer.identity.display_name, "Ava");
                assert_eq!(peer.participant_id, None);
                assert_eq!(*draft_len_after, 1);
                assert!(matches!(input, InputAction::KeyDown { chars: 1, .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(frames[0].record_seq, 7);
    }

    #[test]
    fn own_keystroke_never_echoed() {
        let l = lookup();
        for mode in [ChatMode::Sync, ChatMode::QuasiSync] {
            assert!(visibility_filter(mode, &key_record("subj"), &l.people[0], &l).is_empty());
        }
    }

    #[test]
    fn sync_mouse_is_not_relayed() {
        let l = lookup();
        let mut rec = key_record("wiz");
        rec.payload = EventPayload::InputEvent {
            participant_id: "wiz".into(),
            event: InputEvent::mouse(1, 2, 3, 0),
        };
        assert!(visibility_filter(ChatMode::Sync, &rec, &l.people[0], &l).is_empty());
    }

    #[test]
    fn staff_see_participant_ids() {
        let l = lookup();
        let frames = visibility_filter(ChatMode::Sync, &key_record("subj"), &l.people[1], &l);
        match &frames[0].body {
            ServerBody::PeerKeystroke { peer, .. } => {
                assert_eq!(peer.participant_id, Some("subj".into()))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn identity_switch_is_silent() {
        let l = lookup();
        let rec = EventRecord {
            record_seq: 3,
            session_id: "s".into(),
            server_ts_ms: 0,
            payload: EventPayload::IdentitySwitch {
                participant_id: "wiz".into(),
                identity_index: 1,
            },
        };
        for viewer in &l.people {
            assert!(visibility_filter(ChatMode::Sync, &rec, viewer, &l).is_empty());
        }
    }

    #[test]
    fn internal_annotation_hidden_from_subject() {
        let mut l = lookup();
        let mut m = Message {
            message_id: "s-m00000001".into(),
            session_seq: 1,
            author_participant_id: "wiz".into(),
            author_identity: Identity::new("Ava", "insurance agent"),
            text_original: "helo".into(),
            text_current: "helo".into(),
            submit_ts_client_ms: 0,
            submit_ts_server_ms: 0,
            telemetry: TelemetrySummary::default(),
            annotations: vec![],
        };
        let rating = Annotation {
            annotation_id: "s-a00000001".into(),
            author_participant_id: "wiz".into(),
            target_message_id: m.message_id.clone(),
            ts_server_ms: 1,
            body: AnnotationBody::Rating(4),
            study_internal: true,
        };
        m.annotations.push(rating.clone());
        l.messages.push(m);
        let rec = EventRecord {
            record_seq: 9,
            session_id: "s".into(),
            server_ts_ms: 1,
            payload: EventPayload::Annotation(rating),
        };
        assert!(visibility_filter(ChatMode::QuasiSync, &rec, &l.people[0], &l).is_empty());
        let staff = visibility_filter(ChatMode::QuasiSync, &rec, &l.people[1], &l);
        match &staff[0].body {
            ServerBody::MessageUpdated { message } => {
                assert_eq!(message.annotations.len(), 1);
                assert_eq!(message.text_original.as_deref(), Some("helo"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_action() -> impl Strategy<Value = InputAction> {
            prop_oneof![
                (1u32..5, prop::option::of("[a-z]{1,4}")).prop_map(|(c, t)| match t {
                    Some(t) => InputAction::KeyDown { chars: t.chars().count() as u32, text: Some(t) },
                    None => InputAction::KeyDown { chars: c, text: None },
                }),
                (1u32..5).prop_map(|chars| InputAction::KeyErase { chars }),
                (any::<i32>(), any::<i32>()).prop_map(|(x, y)| InputAction::MouseMove { x, y }),
                Just(InputAction::Focus),
                Just(InputAction::Blur),
            ]
        }

        fn arb_body() -> impl Strategy<Value = ClientBody> {
            prop_oneof![
                ("[a-z0-9-]{1,12}", "\\PC{0,16}", any::<i64>()).prop_map(|(s, t, ts)| ClientBody::Hello {
                    session_id: SessionId::new(s), token: t, client_ts_ms: ts
                }),
                (arb_action(), any::<i64>(), any::<u32>()).prop_map(|(action, ts, len)| ClientBody::Input {
                    event: InputEvent { action, client_ts_ms: ts, draft_len_after: len }
                }),
                ("\\PC{0,40}", any::<i64>()).prop_map(|(text, ts)| ClientBody::Submit { text, client_ts_ms: ts }),
                (0usize..10).prop_map(|identity_index| ClientBody::SwitchIdentity { identity_index }),
                ("[a-z0-9-]{1,12}", 0u32..10, "\\PC{0,10}", prop::option::of(any::<bool>())).prop_map(
                    |(id, r, c, si)| ClientBody::Annotate {
                        target_message_id: MessageId::new(id),
                        annotation: if r % 3 == 0 { AnnotationBody::Rating(r) } else if r % 3 == 1 { AnnotationBody::Comment(c) } else { AnnotationBody::Edit(c) },
                        study_internal: si,
                    }
                ),
                prop_oneof![Just(IndicatorMode::Off), Just(IndicatorMode::TypingOnly), Just(IndicatorMode::TypingAndPause)]
                    .prop_map(|mode| ClientBody::SetIndicator { mode }),
                Just(ClientBody::Bye),
            ]
        }

        proptest! {
            #[test]
            fn client_frame_round_trip(seq in 1u64..u64::MAX, body in arb_body()) {
                let f = ClientFrame { client_seq: seq, body };
                let bytes = encode_frame(&f);
                let back: ClientFrame = decode_frame(&bytes).unwrap();
                prop_assert_eq!(&back, &f);
                prop_assert_eq!(encode_frame(&back), bytes);
            }

            #[test]
            fn server_frame_round_trip(seq in 1u64..1_000_000, action in arb_action(), len in any::<u32>(), name in "\\PC{1,12}") {
                let f = ServerFrame {
                    record_seq: seq,
                    body: ServerBody::PeerKeystroke {
                        peer: PeerRef { identity: Identity::new(name, "role"), participant_id: None },
                        input: action,
                        draft_len_after: len,
                    },
                };
                let back: ServerFrame = decode_frame(&encode_frame(&f)).unwrap();
                prop_assert_eq!(back, f);
            }
        }
    }
}
