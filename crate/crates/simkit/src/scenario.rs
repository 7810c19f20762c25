//! Scenario files: a session config plus one script per participant.
//!
//! Scenarios are TOML. Every step has an `at_ms` offset from the start of
//! the run and an `action`; a step whose offset has already passed (because
//! the previous step was still typing, say) runs as soon as that step ends.
//!
//! ```toml
//! seed = 7            # optional, jitter RNG seed (`--seed` overrides)
//! settle_ms = 500     # optional, linger after the last script step
//!
//! [session]
//! session_id = "demo"
//! mode = "QUASI_SYNC"
//! max_participants = 2
//! indicator_policy = { session_default = "TYPING_AND_PAUSE", idle_timeout_ms = 3000 }
//!
//! [[participants]]
//! name = "subject"
//! kind = "SUBJECT"
//! identities = [{ display_name = "Sam" }]
//! steps = [
//!   { at_ms = 0, action = "type", text = "hello", delay_ms = 120, jitter_ms = 40 },
//!   { at_ms = 0, action = "submit" },
//! ]
//!
//! [[participants]]
//! name = "wizard"
//! kind = "WIZARD"
//! identities = [{ display_name = "Ava" }, { display_name = "Max", presented_as_machine = true }]
//! steps = [
//!   { at_ms = 0, action = "wait_message", session_seq = 1 },
//!   { at_ms = 0, action = "switch_identity", index = 1 },
//!   { at_ms = 0, action = "type", text = "hi Sam" },
//!   { at_ms = 0, action = "submit" },
//! ]
//! ```
//!
//! Actions:
//!
//! | action            | fields                                                        |
//! |-------------------|---------------------------------------------------------------|
//! | `type`            | `text`, `delay_ms` (100), `jitter_ms` (0): one key per char   |
//! | `paste`           | `text`: a single multi-char key event                         |
//! | `erase`           | `count`, `delay_ms` (100): one backspace per char             |
//! | `pause`           | `ms`                                                          |
//! | `mouse`           | `path` (`[[x, y], ...]`), `interval_ms` (100)                 |
//! | `submit`          |                                                               |
//! | `switch_identity` | `index` (staff only)                                          |
//! | `annotate`        | `message_seq`, `kind` (`edit`/`rating`/`comment`), `text` or `value`, `study_internal` (optional) |
//! | `set_indicator`   | `mode`                                                        |
//! | `wait_message`    | `session_seq`, `timeout_ms` (10000): until that message is seen |
//! | `disconnect`      | `abrupt` (false): drop TCP instead of BYE                     |
//! | `reconnect`       |                                                               |

use std::path::Path;

use serde::{Deserialize, Serialize};

use parley_core::{ChatMode, Identity, IndicatorMode, ParticipantKind, SessionConfig};
use parley_gateway::{CreateSessionRequest, ParticipantSpec};

use crate::error::SimError;

fn default_settle_ms() -> u64 {
    500
}

fn default_delay() -> u64 {
    100
}

fn default_wait() -> u64 {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_settle_ms")]
    pub settle_ms: u64,
    pub session: SessionConfig,
    pub participants: Vec<ParticipantScript>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticipantScript {
    /// Label used in transcripts and error messages.
    pub name: String,
    pub kind: ParticipantKind,
    pub identities: Vec<Identity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub participant_id: Option<String>,
    /// Send typed characters even in QUASI_SYNC, as a buggy or hostile
    /// client would. The server must still not relay them.
    #[serde(default)]
    pub send_draft_text: bool,
    #[serde(default)]
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub at_ms: u64,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotateKind {
    Edit,
    Rating,
    Comment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Type {
        text: String,
        #[serde(default = "default_delay")]
        delay_ms: u64,
        #[serde(default)]
        jitter_ms: u64,
    },
    Paste {
        text: String,
    },
    Erase {
        count: u32,
        #[serde(default = "default_delay")]
        delay_ms: u64,
    },
    Pause {
        ms: u64,
    },
    Mouse {
        path: Vec<[i32; 2]>,
        #[serde(default = "default_delay")]
        interval_ms: u64,
    },
    Submit,
    SwitchIdentity {
        index: usize,
    },
    Annotate {
        message_seq: u64,
        kind: AnnotateKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        text: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        value: Option<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        study_internal: Option<bool>,
    },
    SetIndicator {
        mode: IndicatorMode,
    },
    WaitMessage {
        session_seq: u64,
        #[serde(default = "default_wait")]
        timeout_ms: u64,
    },
    Disconnect {
        #[serde(default)]
        abrupt: bool,
    },
    Reconnect,
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Type { .. } => "type",
            Self::Paste { .. } => "paste",
            Self::Erase { .. } => "erase",
            Self::Pause { .. } => "pause",
            Self::Mouse { .. } => "mouse",
            Self::Submit => "submit",
            Self::SwitchIdentity { .. } => "switch_identity",
            Self::Annotate { .. } => "annotate",
            Self::SetIndicator { .. } => "set_indicator",
            Self::WaitMessage { .. } => "wait_message",
            Self::Disconnect { .. } => "disconnect",
            Self::Reconnect => "reconnect",
        }
    }
}

impl Step {
    pub fn new(at_ms: u64, action: Action) -> Self {
        Self { at_ms, action }
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let scenario: Self =
            toml::from_str(text).map_err(|e| SimError::ScriptInvalid(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn from_file(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            SimError::ScriptInvalid(m) => SimError::ScriptInvalid(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The admin request that creates this scenario's session.
    pub fn create_request(&self) -> CreateSessionRequest {
        CreateSessionRequest {
            config: self.session.clone(),
            roster: self
                .participants
                .iter()
                .map(|p| ParticipantSpec {
                    kind: p.kind,
                    identities: p.identities.clone(),
                    participant_id: p.participant_id.clone(),
                })
                .collect(),
        }
    }

    /// Checks every script against its participant's kind and the session
    /// config. Reports all problems at once.
    pub fn validate(&self) -> Result<(), SimError> {
        let mut problems = Vec::new();
        if self.participants.is_empty() {
            problems.push("scenario has no participants".to_owned());
        }
        for (i, p) in self.participants.iter().enumerate() {
            if p.name.is_empty() {
                problems.push(format!("participant #{} has an empty name", i + 1));
            }
            if self.participants[..i].iter().any(|q| q.name == p.name) {
                problems.push(format!("participant name {:?} is used twice", p.name));
            }
            if let Err(e) = p.check(&self.session) {
                problems.push(e);
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SimError::ScriptInvalid(problems.join("; ")))
        }
    }
}

impl ParticipantScript {
    pub fn new(name: impl Into<String>, kind: ParticipantKind, identities: Vec<Identity>) -> Self {
        Self {
            name: name.into(),
            kind,
            identities,
            participant_id: None,
            send_draft_text: false,
            steps: Vec::new(),
        }
    }

    pub fn step(mut self, at_ms: u64, action: Action) -> Self {
        self.steps.push(Step::new(at_ms, action));
        self
    }

    /// Validates the script for this participant's kind, walking the
    /// draft and connection state the steps imply.
    pub fn check(&self, session: &SessionConfig) -> Result<(), String> {
        let staff = matches!(self.kind, ParticipantKind::Wizard | ParticipantKind::Leader);
        let mut draft: u64 = 0;
        let mut connected = true;
        let mut last_at = 0;
        let mut problems = Vec::new();
        for (i, step) in self.steps.iter().enumerate() {
            let mut bad = |m: String| problems.push(format!("{} step {} ({}): {m}", self.name, i + 1, step.action.name()));
            if step.at_ms < last_at {
                bad(format!("at_ms {} is before the previous step's {last_at}", step.at_ms));
            }
            last_at = step.at_ms;
            let needs_connection = !matches!(step.action, Action::Pause { .. } | Action::Reconnect);
            if needs_connection && !connected {
                bad("participant is disconnected".into());
            }
            match &step.action {
                Action::Type { text, .. } | Action::Paste { text } => {
                    if text.is_empty() {
                        bad("empty text".into());
                    }
                    draft += text.chars().count() as u64;
                }
                Action::Erase { count, .. } => {
                    if *count == 0 || u64::from(*count) > draft {
                        bad(format!("cannot erase {count} chars from a draft of {draft}"));
                    }
                    draft = draft.saturating_sub(u64::from(*count));
                }
                Action::Mouse { path, .. } => {
                    if path.is_empty() {
                        bad("empty path".into());
                    }
                }
                Action::Submit => {
                    if draft == 0 {
                        bad("nothing typed".into());
                    }
                    draft = 0;
                }
                Action::SwitchIdentity { index } => {
                    if !staff {
                        bad(format!("a {:?} cannot switch identity", self.kind));
                    } else if *index >= self.identities.len() {
                        bad(format!("identity index {index} out of range (have {})", self.identities.len()));
                    }
                }
                Action::Annotate {
                    message_seq,
                    kind,
                    text,
                    value,
                    ..
                } => {
                    if *message_seq == 0 {
                        bad("message_seq starts at 1".into());
                    }
                    match kind {
                        AnnotateKind::Edit if !staff => bad(format!("a {:?} cannot edit messages", self.kind)),
                        AnnotateKind::Edit | AnnotateKind::Comment if text.is_none() || value.is_some() => {
                            bad("edit and comment take `text`".into())
                        }
                        AnnotateKind::Rating => match (value, text) {
                            (Some(v), None) if (1..=session.rating_scale_max).contains(v) => {}
                            (Some(v), None) => bad(format!("rating {v} outside 1..={}", session.rating_scale_max)),
                            _ => bad("rating takes `value`".into()),
                        },
                        _ => {}
                    }
                }
                Action::WaitMessage { session_seq, .. } => {
                    if *session_seq == 0 {
                        bad("session_seq starts at 1".into());
                    }
                }
                Action::Disconnect { .. } => {
                    connected = false;
                }
                Action::Reconnect => {
                    if connected {
                        bad("already connected".into());
                    }
                    connected = true;
                }
                Action::Pause { .. } | Action::SetIndicator { .. } => {}
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems.join("; "))
        }
    }
}

/// Shorthand for the session block of programmatic scenarios.
pub fn session(session_id: &str, mode: ChatMode, max_participants: u32) -> SessionConfig {
    let mut config = SessionConfig::new(session_id, mode);
    config.max_participants = max_participants;
    config
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEMO: &str = r#"
        seed = 3
        [session]
        session_id = "demo"
        mode = "SYNC"
        max_participants = 2
        [[participants]]
        name = "s"
        kind = "SUBJECT"
        identities = [{ display_name = "Sam" }]
        steps = [
          { at_ms = 0, action = "type", text = "hi", jitter_ms = 20 },
          { at_ms = 500, action = "erase", count = 1 },
          { at_ms = 600, action = "submit" },
          { at_ms = 700, action = "annotate", message_seq = 1, kind = "rating", value = 4 },
        ]
        [[participants]]
        name = "w"
        kind = "WIZARD"
        identities = [{ display_name = "Ava" }, { display_name = "Max" }]
        [[participants.steps]]
        at_ms = 0
        action = "switch_identity"
        index = 1
    "#;

    #[test]
    fn parses_both_step_notations() {
        let s = Scenario::from_toml(DEMO).unwrap();
        assert_eq!(s.seed, 3);
        assert_eq!(s.settle_ms, 500);
        assert_eq!(
            s.participants[0].steps[0].action,
            Action::Type {
                text: "hi".into(),
                delay_ms: 100,
                jitter_ms: 20
            }
        );
        assert_eq!(s.participants[1].steps, vec![Step::new(0, Action::SwitchIdentity { index: 1 })]);
        let req = s.create_request();
        assert_eq!(req.roster.len(), 2);
        assert_eq!(req.roster[1].identities.len(), 2);
    }

    #[test]
    fn round_trips_through_toml() {
        let s = Scenario::from_toml(DEMO).unwrap();
        let text = toml::to_string(&s).unwrap();
        assert_eq!(Scenario::from_toml(&text).unwrap(), s);
    }

    fn invalid(text: &str) -> String {
        match Scenario::from_toml(text) {
            Err(SimError::ScriptInvalid(m)) => m,
            other => panic!("expected SCRIPT_INVALID, got {other:?}"),
        }
    }

    #[test]
    fn subject_switch_identity_is_invalid() {
        let m = invalid(&DEMO.replace("kind = \"WIZARD\"", "kind = \"SUBJECT\""));
        assert!(m.contains("cannot switch identity"), "{m}");
    }

    #[test]
    fn unknown_action_and_field_are_invalid() {
        invalid(&DEMO.replace("action = \"submit\"", "action = \"dance\""));
        invalid(&DEMO.replace("seed = 3", "seed = 3\nspeed = 1"));
    }

    #[test]
    fn script_rules() {
        let cfg = session("x", ChatMode::Sync, 2);
        let sam = || ParticipantScript::new("sam", ParticipantKind::Subject, vec![Identity::new("Sam", "")]);
        let cases = [
            (sam().step(10, Action::Submit).step(5, Action::Pause { ms: 1 }), "before the previous"),
            (sam().step(0, Action::Erase { count: 1, delay_ms: 1 }), "cannot erase"),
            (sam().step(0, Action::Submit), "nothing typed"),
            (
                sam().step(
                    0,
                    Action::Annotate {
                        message_seq: 1,
                        kind: AnnotateKind::Edit,
                        text: Some("x".into()),
                        value: None,
                        study_internal: None,
                    },
                ),
                "cannot edit",
            ),
            (
                sam().step(
                    0,
                    Action::Annotate {
                        message_seq: 1,
                        kind: AnnotateKind::Rating,
                        text: None,
                        value: Some(6),
                        study_internal: None,
                    },
                ),
                "outside 1..=5",
            ),
            (sam().step(0, Action::Reconnect), "already connected"),
            (
                sam().step(0, Action::Disconnect { abrupt: true }).step(1, Action::Submit),
                "disconnected",
            ),
        ];
        for (script, want) in cases {
            let err = script.check(&cfg).unwrap_err();
            assert!(err.contains(want), "{err} lacks {want}");
        }
        let ok = sam()
            .step(0, Action::Paste { text: "abc".into() })
            .step(0, Action::Erase { count: 3, delay_ms: 5 })
            .step(0, Action::Type { text: "z".into(), delay_ms: 1, jitter_ms: 0 })
            .step(0, Action::Disconnect { abrupt: false })
            .step(0, Action::Pause { ms: 10 })
            .step(0, Action::Reconnect)
            .step(0, Action::Submit);
        ok.check(&cfg).unwrap();
    }
}
