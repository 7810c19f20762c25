//! Shared domain types and their validation rules.
//!
//! Everything here is a plain value: no I/O, no clocks. Timestamps are integer
//! milliseconds. Client timestamps are recorded but only server timestamps and
//! `record_seq` ever decide ordering.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Integer milliseconds. Client and server clocks both use this unit.
pub type Millis = i64;

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

id_newtype!(
    /// Unique per store.
    SessionId
);
id_newtype!(ParticipantId);
id_newtype!(MessageId);
id_newtype!(AnnotationId);

impl MessageId {
    /// Message ids are derived from the session and the dense message sequence,
    /// so replay regenerates them exactly.
    pub fn for_seq(session: &SessionId, session_seq: u64) -> Self {
        Self(format!("{session}-m{session_seq:08}"))
    }
}

impl AnnotationId {
    pub fn for_seq(session: &SessionId, n: u64) -> Self {
        Self(format!("{session}-a{n:08}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ChatMode {
    /// Only submitted turns travel; drafts stay with the writer.
    QuasiSync,
    /// Every keystroke is relayed live into the author's own pane.
    Sync,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IndicatorMode {
    Off,
    TypingOnly,
    TypingAndPause,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TypingState {
    Idle,
    Typing,
    Paused,
}

/// Who gets a typing indicator and how long a silent draft counts as typing.
///
/// Overrides are keyed by the *author* whose indicator they shape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TypingIndicatorPolicy {
    pub session_default: IndicatorMode,
    pub idle_timeout_ms: u64,
    #[serde(default)]
    pub per_participant_overrides: BTreeMap<ParticipantId, IndicatorMode>,
    #[serde(default)]
    pub leader_locked: bool,
}

impl Default for TypingIndicatorPolicy {
    fn default() -> Self {
        Self {
            session_default: IndicatorMode::TypingAndPause,
            idle_timeout_ms: 3000,
            per_participant_overrides: BTreeMap::new(),
            leader_locked: false,
        }
    }
}

impl TypingIndicatorPolicy {
    pub fn uniform(mode: IndicatorMode, idle_timeout_ms: u64) -> Self {
        Self {
            session_default: mode,
            idle_timeout_ms,
            ..Self::default()
        }
    }

    /// The mode that applies to `author`'s indicator.
    pub fn mode_for(&self, author: &ParticipantId) -> IndicatorMode {
        if self.leader_locked {
            return self.session_default;
        }
        self.per_participant_overrides
            .get(author)
            .copied()
            .unwrap_or(self.session_default)
    }

    pub fn violations(&self) -> Vec<ValidationError> {
        let mut out = Vec::new();
        if self.idle_timeout_ms == 0 {
            out.push(ValidationError::IdleTimeoutNotPositive);
        }
        if self.leader_locked && !self.per_participant_overrides.is_empty() {
            out.push(ValidationError::LockedPolicyHasOverrides);
        }
        out
    }
}

fn default_rating_scale() -> u32 {
    5
}

fn default_mouse_interval() -> u64 {
    100
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub session_id: SessionId,
    pub mode: ChatMode,
    #[serde(default)]
    pub indicator_policy: TypingIndicatorPolicy,
    pub max_participants: u32,
    #[serde(default = "default_rating_scale")]
    pub rating_scale_max: u32,
    #[serde(default = "default_mouse_interval")]
    pub mouse_sample_interval_ms: u64,
    #[serde(default)]
    pub title: String,
}

impl SessionConfig {
    /// A config with defaults for everything except id and mode.
    pub fn new(session_id: impl Into<String>, mode: ChatMode) -> Self {
        Self {
            session_id: SessionId::new(session_id),
            mode,
            indicator_policy: TypingIndicatorPolicy::default(),
            max_participants: 2,
            rating_scale_max: default_rating_scale(),
            mouse_sample_interval_ms: default_mouse_interval(),
            title: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ValidationError {
    #[error("session_id must be non-empty and use only [A-Za-z0-9_-]")]
    BadSessionId,
    #[error("max_participants ≥ 2 violated (got {0})")]
    TooFewParticipants(u32),
    #[error("rating_scale_max ≥ 1 violated")]
    RatingScaleEmpty,
    #[error("mouse_sample_interval_ms > 0 violated")]
    MouseIntervalNotPositive,
    #[error("indicator_policy: idle_timeout_ms > 0 violated")]
    IdleTimeoutNotPositive,
    #[error("indicator_policy: leader_locked requires empty per_participant_overrides")]
    LockedPolicyHasOverrides,
    #[error("participant {0}: identities must be non-empty")]
    NoIdentities(ParticipantId),
    #[error("participant {0}: active_identity_index out of range")]
    ActiveIdentityOutOfRange(ParticipantId),
    #[error("participant {0}: a SUBJECT has exactly one identity")]
    SubjectWithManyIdentities(ParticipantId),
    #[error("participant {0}: display_name must be non-empty")]
    EmptyDisplayName(ParticipantId),
    #[error("duplicate participant id {0}")]
    DuplicateParticipant(ParticipantId),
}

/// Session ids double as log file names, so they are restricted to a safe alphabet.
pub fn is_valid_session_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

/// Lists every violated [`SessionConfig`] invariant, or `Ok(())`.
pub fn validate_session_config(cfg: &SessionConfig) -> Result<(), Vec<ValidationError>> {
    let mut errs = Vec::new();
    if !is_valid_session_id(cfg.session_id.as_str()) {
        errs.push(ValidationError::BadSessionId);
    }
    if cfg.max_participants < 2 {
        errs.push(ValidationError::TooFewParticipants(cfg.max_participants));
    }
    if cfg.rating_scale_max < 1 {
        errs.push(ValidationError::RatingScaleEmpty);
    }
    if cfg.mouse_sample_interval_ms == 0 {
        errs.push(ValidationError::MouseIntervalNotPositive);
    }
    errs.extend(cfg.indicator_policy.violations());
    if errs.is_empty() {
        Ok(())
    } else {
        Err(errs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ParticipantKind {
    Subject,
    Wizard,
    Leader,
    Bot,
}

impl ParticipantKind {
    /// Wizards and leaders run the study and may see study-internal data.
    pub fn is_staff(self) -> bool {
        matches!(self, Self::Wizard | Self::Leader)
    }
}

/// A displayed persona: what other participants see instead of the real account.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Identity {
    pub display_name: String,
    #[serde(default)]
    pub role_label: String,
    #[serde(default)]
    pub presented_as_machine: bool,
}

impl Identity {
    pub fn new(display_name: impl Into<String>, role_label: impl Into<String>) -> Self {
        Self {
            display_name: display_name.into(),
            role_label: role_label.into(),
            presented_as_machine: false,
        }
    }

    pub fn machine(mut self) -> Self {
        self.presented_as_machine = true;
        self
    }
}

/// SHA-256 of a join token. Only the digest is ever stored or logged.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenDigest(String);

impl TokenDigest {
    pub fn of(token: &str) -> Self {
        Self(hex::encode(Sha256::digest(token.as_bytes())))
    }

    pub fn matches(&self, token: &str) -> bool {
        *self == Self::of(token)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Participant {
    pub participant_id: ParticipantId,
    pub token_digest: TokenDigest,
    pub kind: ParticipantKind,
    pub identities: Vec<Identity>,
    #[serde(default)]
    pub active_identity_index: usize,
}

impl Participant {
    pub fn new(
        participant_id: impl Into<String>,
        token: &str,
        kind: ParticipantKind,
        identities: Vec<Identity>,
    ) -> Self {
        Self {
            participant_id: ParticipantId::new(participant_id),
            token_digest: TokenDigest::of(token),
            kind,
            identities,
            active_identity_index: 0,
        }
    }

    /// Panics only if the participant was never validated.
    pub fn active_identity(&self) -> &Identity {
        &self.identities[self.active_identity_index]
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        let id = || self.participant_id.clone();
        if self.identities.is_empty() {
            return Err(ValidationError::NoIdentities(id()));
        }
        if self.active_identity_index >= self.identities.len() {
            return Err(ValidationError::ActiveIdentityOutOfRange(id()));
        }
        if self.kind == ParticipantKind::Subject && self.identities.len() != 1 {
            return Err(ValidationError::SubjectWithManyIdentities(id()));
        }
        if self.identities.iter().any(|i| i.display_name.trim().is_empty()) {
            return Err(ValidationError::EmptyDisplayName(id()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InputKind {
    KeyDown,
    KeyErase,
    MouseMove,
    Focus,
    Blur,
}

/// What a single raw input event did.
///
/// A paste is one `KeyDown` with `chars > 1`. `text` carries the inserted
/// characters and is only sent by clients in synchronous sessions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InputAction {
    KeyDown {
        chars: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        text: Option<String>,
    },
    KeyErase {
        chars: u32,
    },
    MouseMove {
        x: i32,
        y: i32,
    },
    Focus,
    Blur,
}

impl InputAction {
    pub fn kind(&self) -> InputKind {
        match self {
            Self::KeyDown { .. } => InputKind::KeyDown,
            Self::KeyErase { .. } => InputKind::KeyErase,
            Self::MouseMove { .. } => InputKind::MouseMove,
            Self::Focus => InputKind::Focus,
            Self::Blur => InputKind::Blur,
        }
    }

    pub fn is_key(&self) -> bool {
        matches!(self, Self::KeyDown { .. } | Self::KeyErase { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputEvent {
    pub action: InputAction,
    pub client_ts_ms: Millis,
    pub draft_len_after: u32,
}

impl InputEvent {
    pub fn key_down(client_ts_ms: Millis, chars: u32, draft_len_after: u32) -> Self {
        Self {
            action: InputAction::KeyDown { chars, text: None },
            client_ts_ms,
            draft_len_after,
        }
    }

    pub fn typed(client_ts_ms: Millis, text: &str, draft_len_after: u32) -> Self {
        Self {
            action: InputAction::KeyDown {
                chars: text.chars().count() as u32,
                text: Some(text.to_owned()),
            },
            client_ts_ms,
            draft_len_after,
        }
    }

    pub fn erase(client_ts_ms: Millis, chars: u32, draft_len_after: u32) -> Self {
        Self {
            action: InputAction::KeyErase { chars },
            client_ts_ms,
            draft_len_after,
        }
    }

    pub fn mouse(client_ts_ms: Millis, x: i32, y: i32, draft_len_after: u32) -> Self {
        Self {
            action: InputAction::MouseMove { x, y },
            client_ts_ms,
            draft_len_after,
        }
    }

    pub fn kind(&self) -> InputKind {
        self.action.kind()
    }

    /// Draft length implied by applying this event to a draft of `before` chars.
    pub fn draft_len_from(&self, before: u32) -> u32 {
        match &self.action {
            InputAction::KeyDown { chars, .. } => before.saturating_add(*chars),
            InputAction::KeyErase { chars } => before.saturating_sub(*chars),
            _ => before,
        }
    }

    /// Checks the payload on its own, without any draft context.
    pub fn check_payload(&self) -> Result<(), &'static str> {
        match &self.action {
            InputAction::KeyDown { chars: 0, .. } => Err("KEY_DOWN must insert at least one char"),
            InputAction::KeyDown {
                chars,
                text: Some(t),
            } if t.chars().count() as u32 != *chars => {
                Err("KEY_DOWN text length differs from its char count")
            }
            InputAction::KeyErase { chars: 0 } => Err("KEY_ERASE must erase at least one char"),
            _ => Ok(()),
        }
    }
}

/// Per-message performance metrics. Optional reals are absent, never zero, when undefined.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TelemetrySummary {
    pub pause_before_ms: u64,
    pub typing_duration_ms: u64,
    pub char_count: u64,
    pub keystroke_count: u64,
    pub erase_count: u64,
    pub speed_cps: f64,
    pub iki_mean_ms: Option<f64>,
    pub iki_stddev_ms: Option<f64>,
    pub iki_cv: Option<f64>,
    pub iki_list_ms: Vec<u64>,
    pub mouse_path_px: f64,
    pub mouse_event_count: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AnnotationKind {
    Edit,
    Rating,
    Comment,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AnnotationBody {
    /// Full replacement text.
    Edit(String),
    Rating(u32),
    Comment(String),
}

impl AnnotationBody {
    pub fn kind(&self) -> AnnotationKind {
        match self {
            Self::Edit(_) => AnnotationKind::Edit,
            Self::Rating(_) => AnnotationKind::Rating,
            Self::Comment(_) => AnnotationKind::Comment,
        }
    }

    /// Ratings and comments are for researchers; edits are visible by default.
    pub fn default_study_internal(&self) -> bool {
        !matches!(self, Self::Edit(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub annotation_id: AnnotationId,
    pub author_participant_id: ParticipantId,
    pub target_message_id: MessageId,
    pub ts_server_ms: Millis,
    pub body: AnnotationBody,
    pub study_internal: bool,
}

impl Annotation {
    pub fn kind(&self) -> AnnotationKind {
        self.body.kind()
    }

    fn order_key(&self) -> (Millis, &AnnotationId) {
        (self.ts_server_ms, &self.annotation_id)
    }
}

/// Current text of a message given its EDIT annotations.
///
/// Edits replace the whole text; the winner is the greatest edit under
/// `(ts_server_ms, annotation_id)`. Non-edit annotations are ignored.
pub fn apply_edits<'a>(
    text_original: &str,
    edits: impl IntoIterator<Item = &'a Annotation>,
) -> String {
    edits
        .into_iter()
        .filter_map(|a| match &a.body {
            AnnotationBody::Edit(text) => Some((a.order_key(), text)),
            _ => None,
        })
        .max_by(|a, b| a.0.cmp(&b.0))
        .map(|(_, text)| text.clone())
        .unwrap_or_else(|| text_original.to_owned())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub message_id: MessageId,
    pub session_seq: u64,
    pub author_participant_id: ParticipantId,
    /// Snapshot taken at submission; later identity switches never rewrite it.
    pub author_identity: Identity,
    pub text_original: String,
    pub text_current: String,
    pub submit_ts_client_ms: Millis,
    pub submit_ts_server_ms: Millis,
    pub telemetry: TelemetrySummary,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
}

impl Message {
    pub fn edit_count(&self) -> usize {
        self.annotations
            .iter()
            .filter(|a| a.kind() == AnnotationKind::Edit)
            .count()
    }

    /// Latest rating by each annotator. Earlier ratings by the same author are superseded.
    pub fn ratings_by_author(&self) -> BTreeMap<&ParticipantId, u32> {
        let mut out = BTreeMap::new();
        for a in self.annotations_in_order() {
            if let AnnotationBody::Rating(r) = a.body {
                out.insert(&a.author_participant_id, r);
            }
        }
        out
    }

    /// The most recent rating from anyone.
    pub fn rating_latest(&self) -> Option<u32> {
        self.annotations_in_order()
            .filter_map(|a| match a.body {
                AnnotationBody::Rating(r) => Some(r),
                _ => None,
            })
            .last()
    }

    pub fn comments(&self) -> impl Iterator<Item = &str> {
        self.annotations_in_order().filter_map(|a| match &a.body {
            AnnotationBody::Comment(c) => Some(c.as_str()),
            _ => None,
        })
    }

    pub fn annotations_in_order(&self) -> impl Iterator<Item = &Annotation> {
        let mut v: Vec<&Annotation> = self.annotations.iter().collect();
        v.sort_by(|a, b| a.order_key().cmp(&b.order_key()));
        v.into_iter()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LeaveReason {
    Bye,
    Disconnect,
    Backpressure,
    Superseded,
    Restart,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    SessionCreated,
    Join,
    Leave,
    IdentitySwitch,
    InputEvent,
    TypingState,
    Message,
    Annotation,
    PolicyChanged,
    SessionClosed,
}

impl EventKind {
    pub const ALL: [EventKind; 10] = [
        Self::SessionCreated,
        Self::Join,
        Self::Leave,
        Self::IdentitySwitch,
        Self::InputEvent,
        Self::TypingState,
        Self::Message,
        Self::Annotation,
        Self::PolicyChanged,
        Self::SessionClosed,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventPayload {
    SessionCreated {
        config: SessionConfig,
        roster: Vec<Participant>,
    },
    Join {
        participant_id: ParticipantId,
        /// The client's clock reading sent in HELLO; anchors telemetry windows.
        hello_client_ts_ms: Millis,
    },
    Leave {
        participant_id: ParticipantId,
        reason: LeaveReason,
    },
    IdentitySwitch {
        participant_id: ParticipantId,
        identity_index: usize,
    },
    InputEvent {
        participant_id: ParticipantId,
        event: InputEvent,
    },
    TypingState {
        participant_id: ParticipantId,
        state: TypingState,
    },
    Message(Message),
    Annotation(Annotation),
    PolicyChanged {
        policy: TypingIndicatorPolicy,
    },
    SessionClosed,
}

impl EventPayload {
    pub fn kind(&self) -> EventKind {
        match self {
            Self::SessionCreated { .. } => EventKind::SessionCreated,
            Self::Join { .. } => EventKind::Join,
            Self::Leave { .. } => EventKind::Leave,
            Self::IdentitySwitch { .. } => EventKind::IdentitySwitch,
            Self::InputEvent { .. } => EventKind::InputEvent,
            Self::TypingState { .. } => EventKind::TypingState,
            Self::Message(_) => EventKind::Message,
            Self::Annotation(_) => EventKind::Annotation,
            Self::PolicyChanged { .. } => EventKind::PolicyChanged,
            Self::SessionClosed => EventKind::SessionClosed,
        }
    }
}

/// One entry of a session's append-only log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub record_seq: u64,
    pub session_id: SessionId,
    pub server_ts_ms: Millis,
    #[serde(flatten)]
    pub payload: EventPayload,
}

impl EventRecord {
    pub fn kind(&self) -> EventKind {
        self.payload.kind()
    }
}
