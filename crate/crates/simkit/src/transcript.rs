//! What a scripted client saw and sent, plus the checks run over it.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use parley_core::{
    decode_frame, ClientBody, ClientFrame, InputAction, ParticipantId, ParticipantKind, ServerBody,
    ServerFrame, TypingState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Sent,
    Recv,
    /// Local happenings: connection opened or closed.
    Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    /// Milliseconds since the start of the run, local clock.
    pub t_ms: f64,
    /// Connection number within the script, from 1.
    pub conn: u32,
    pub dir: Direction,
    pub frame: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub name: String,
    pub kind: ParticipantKind,
    /// As announced by WELCOME.
    pub participant_id: Option<ParticipantId>,
    pub entries: Vec<Entry>,
}

impl Transcript {
    pub fn new(name: impl Into<String>, kind: ParticipantKind) -> Self {
        Self {
            name: name.into(),
            kind,
            participant_id: None,
            entries: Vec::new(),
        }
    }

    /// Received frames that decode, with their local receive time.
    pub fn received(&self) -> impl Iterator<Item = (f64, ServerFrame)> + '_ {
        self.entries
            .iter()
            .filter(|e| e.dir == Direction::Recv)
            .filter_map(|e| Some((e.t_ms, decode_frame(e.frame.to_string().as_bytes()).ok()?)))
    }

    pub fn sent(&self) -> impl Iterator<Item = (f64, ClientFrame)> + '_ {
        self.entries
            .iter()
            .filter(|e| e.dir == Direction::Sent)
            .filter_map(|e| Some((e.t_ms, decode_frame(e.frame.to_string().as_bytes()).ok()?)))
    }

    /// Everything received, as wire text, one frame per line.
    pub fn received_text(&self) -> String {
        let mut out = String::new();
        for e in self.entries.iter().filter(|e| e.dir == Direction::Recv) {
            out.push_str(&e.frame.to_string());
            out.push('\n');
        }
        out
    }

    pub fn errors(&self) -> Vec<(String, String)> {
        self.received()
            .filter_map(|(_, f)| match f.body {
                ServerBody::Error { code, detail, .. } => Some((format!("{code:?}"), detail)),
                _ => None,
            })
            .collect()
    }

    /// Record-derived frames whose `record_seq` does not strictly increase.
    /// ERROR frames carry no record and are skipped.
    pub fn order_violations(&self) -> Vec<String> {
        let mut last = 0;
        let mut out = Vec::new();
        for (t, f) in self.received() {
            if matches!(f.body, ServerBody::Error { .. }) {
                continue;
            }
            if f.record_seq <= last {
                out.push(format!(
                    "{}: {} with record_seq {} after {last} at {t:.1}ms",
                    self.name,
                    f.body.kind_name(),
                    f.record_seq
                ));
            }
            last = f.record_seq;
        }
        out
    }

    /// Key events relayed for the peer currently shown as `display_name`.
    pub fn peer_keystrokes(&self, display_name: &str) -> Vec<InputAction> {
        self.received()
            .filter_map(|(_, f)| match f.body {
                ServerBody::PeerKeystroke { peer, input, .. }
                    if peer.identity.display_name == display_name && input.is_key() =>
                {
                    Some(input)
                }
                _ => None,
            })
            .collect()
    }

    /// Key events this client sent, in order.
    pub fn sent_keystrokes(&self) -> Vec<InputAction> {
        self.sent()
            .filter_map(|(_, f)| match f.body {
                ClientBody::Input { event } if event.action.is_key() => Some(event.action),
                _ => None,
            })
            .collect()
    }

    /// Texts this client submitted, in order.
    pub fn submitted(&self) -> Vec<String> {
        self.sent()
            .filter_map(|(_, f)| match f.body {
                ClientBody::Submit { text, .. } => Some(text),
                _ => None,
            })
            .collect()
    }

    /// Typing states shown for the peer displayed as `display_name`.
    pub fn typing_states(&self, display_name: &str) -> Vec<TypingState> {
        self.received()
            .filter_map(|(_, f)| match f.body {
                ServerBody::TypingState { peer, state } if peer.identity.display_name == display_name => {
                    Some(state)
                }
                _ => None,
            })
            .collect()
    }

    /// Milliseconds from each SUBMIT to the MESSAGE_POSTED that echoes it.
    /// Echoes are matched by text in submission order.
    pub fn echo_latencies(&self) -> Vec<f64> {
        let mut pending: VecDeque<(f64, String)> = VecDeque::new();
        let mut out = Vec::new();
        let mut events: Vec<(f64, Option<String>, Option<String>)> = self
            .sent()
            .filter_map(|(t, f)| match f.body {
                ClientBody::Submit { text, .. } => Some((t, Some(text), None)),
                _ => None,
            })
            .collect();
        events.extend(self.received().filter_map(|(t, f)| match f.body {
            ServerBody::MessagePosted { message } => Some((t, None, Some(message.text))),
            _ => None,
        }));
        events.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (t, sent, posted) in events {
            if let Some(text) = sent {
                pending.push_back((t, text.trim_end_matches(['\n', '\r']).to_owned()));
            } else if let Some(text) = posted {
                if pending.front().is_some_and(|(_, p)| *p == text) {
                    let (t0, _) = pending.pop_front().unwrap();
                    out.push(t - t0);
                }
            }
        }
        out
    }
}

/// Applies a key stream to an empty draft. Returns `None` if a KEY_DOWN
/// carries no text, since the draft cannot then be known.
pub fn fold_keystrokes(actions: &[InputAction]) -> Option<String> {
    let mut draft: Vec<char> = Vec::new();
    for a in actions {
        match a {
            InputAction::KeyDown { text, .. } => draft.extend(text.as_ref()?.chars()),
            InputAction::KeyErase { chars } => {
                let keep = draft.len().saturating_sub(*chars as usize);
                draft.truncate(keep);
            }
            _ => {}
        }
    }
    Some(draft.into_iter().collect())
}

/// Splits a key stream at each point where the folded draft was submitted,
/// given the submitted texts in order. Used to fold a multi-message stream.
pub fn fold_turns(actions: &[InputAction], submitted: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut draft: Vec<char> = Vec::new();
    let mut next = submitted.iter();
    let mut want = next.next();
    for a in actions {
        match a {
            InputAction::KeyDown { text, .. } => draft.extend(text.as_deref().unwrap_or("").chars()),
            InputAction::KeyErase { chars } => {
                let keep = draft.len().saturating_sub(*chars as usize);
                draft.truncate(keep);
            }
            _ => {}
        }
        let current: String = draft.iter().collect();
        if want.is_some_and(|w| *w == current) {
            out.push(current);
            draft.clear();
            want = next.next();
        }
    }
    out
}

/// 95th percentile by nearest rank; 0 for an empty slice.
pub fn p95(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((0.95 * v.len() as f64).ceil() as usize).max(1);
    v[rank - 1]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn down(t: &str) -> InputAction {
        InputAction::KeyDown {
            chars: t.chars().count() as u32,
            text: Some(t.into()),
        }
    }

    fn erase(n: u32) -> InputAction {
        InputAction::KeyErase { chars: n }
    }

    #[test]
    fn fold_applies_erases() {
        let s = [down("h"), down("e"), down("y"), erase(1), down("llo"), erase(9), down("ok")];
        assert_eq!(fold_keystrokes(&s).unwrap(), "ok");
        assert_eq!(fold_keystrokes(&s[..5]).unwrap(), "hello");
        assert!(fold_keystrokes(&[InputAction::KeyDown { chars: 1, text: None }]).is_none());
    }

    #[test]
    fn fold_turns_splits_at_submissions() {
        let s = [down("a"), down("b"), down("c"), erase(1), down("x")];
        let turns = fold_turns(&s, &["ab".into(), "x".into()]);
        assert_eq!(turns, vec!["ab".to_string(), "x".to_string()]);
    }

    #[test]
    fn p95_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(p95(&v), 95.0);
        assert_eq!(p95(&[3.0]), 3.0);
        assert_eq!(p95(&[]), 0.0);
    }

    fn entry(t: f64, dir: Direction, frame: Value) -> Entry {
        Entry {
            t_ms: t,
            conn: 1,
            dir,
            frame,
        }
    }

    #[test]
    fn order_check_skips_errors() {
        let mut tr = Transcript::new("x", ParticipantKind::Subject);
        let err = serde_json::json!({"v":1,"kind":"ERROR","record_seq":0,"body":{"code":"EMPTY_MESSAGE","detail":"","fatal":false}});
        let idle = |seq: u64| {
            serde_json::json!({"v":1,"kind":"TYPING_STATE","record_seq":seq,"body":{"peer":{"identity":{"display_name":"A"}},"state":"IDLE"}})
        };
        tr.entries.push(entry(1.0, Direction::Recv, idle(4)));
        tr.entries.push(entry(2.0, Direction::Recv, err));
        tr.entries.push(entry(3.0, Direction::Recv, idle(5)));
        assert!(tr.order_violations().is_empty());
        tr.entries.push(entry(4.0, Direction::Recv, idle(5)));
        assert_eq!(tr.order_violations().len(), 1);
        assert_eq!(tr.typing_states("A"), vec![TypingState::Idle; 3]);
        assert_eq!(tr.errors().len(), 1);
    }
}
