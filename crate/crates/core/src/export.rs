//! Tabular export of a session log, one row per message.
//!
//! Rows are derived from the log on every export: message state comes from
//! replay and every telemetry column is recomputed from the raw input events,
//! never copied from the summary stored with the message.

use std::fmt;
use std::str::FromStr;

use crate::engine::{window_start, SessionState};
use crate::model::{EventPayload, EventRecord, InputEvent, Millis, ParticipantId, TelemetrySummary};
use crate::telemetry::{summarize, EventWindow};
use crate::wire::{decode_frame, encode_frame, DecodeError};
use crate::xlsx::{self, Cell};

/// Bumped whenever [`COLUMNS`] changes.
pub const SCHEMA_VERSION: u32 = 1;

pub const SHEET_NAME: &str = "messages";

pub const COLUMNS: [&str; 26] = [
    "session_id",
    "session_seq",
    "message_id",
    "author_participant_id",
    "author_display_name",
    "author_role_label",
    "author_kind",
    "submit_ts_client_ms",
    "submit_ts_server_ms",
    "text_original",
    "text_current",
    "edit_count",
    "rating_latest",
    "comment_concat",
    "pause_before_ms",
    "typing_duration_ms",
    "char_count",
    "keystroke_count",
    "erase_count",
    "speed_cps",
    "iki_mean_ms",
    "iki_stddev_ms",
    "iki_cv",
    "iki_list_ms",
    "mouse_path_px",
    "mouse_event_count",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Xlsx,
}

impl FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "xlsx" => Ok(Self::Xlsx),
            other => Err(format!("unknown export format `{other}` (expected csv or xlsx)")),
        }
    }
}

impl fmt::Display for ExportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Csv => "csv",
            Self::Xlsx => "xlsx",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExportError {
    #[error("CORRUPT_LOG at record {record_seq}: {reason}")]
    CorruptLog { record_seq: u64, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportRow {
    pub session_id: String,
    pub session_seq: u64,
    pub message_id: String,
    pub author_participant_id: String,
    pub author_display_name: String,
    pub author_role_label: String,
    pub author_kind: String,
    pub submit_ts_client_ms: Millis,
    pub submit_ts_server_ms: Millis,
    pub text_original: String,
    pub text_current: String,
    pub edit_count: u64,
    pub rating_latest: Option<u32>,
    pub comment_concat: String,
    pub telemetry: TelemetrySummary,
}

fn opt_real(v: Option<f64>) -> Cell {
    v.map_or(Cell::Empty, Cell::Real)
}

impl ExportRow {
    pub fn cells(&self) -> Vec<Cell> {
        let t = &self.telemetry;
        let int = |v: u64| Cell::Int(v as i64);
        let text = |s: &str| Cell::Text(s.to_owned());
        vec![
            text(&self.session_id),
            int(self.session_seq),
            text(&self.message_id),
            text(&self.author_participant_id),
            text(&self.author_display_name),
            text(&self.author_role_label),
            text(&self.author_kind),
            Cell::Int(self.submit_ts_client_ms),
            Cell::Int(self.submit_ts_server_ms),
            text(&self.text_original),
            text(&self.text_current),
            int(self.edit_count),
            self.rating_latest.map_or(Cell::Empty, |r| Cell::Int(r as i64)),
            text(&self.comment_concat),
            int(t.pause_before_ms),
            int(t.typing_duration_ms),
            int(t.char_count),
            int(t.keystroke_count),
            int(t.erase_count),
            Cell::Real(t.speed_cps),
            opt_real(t.iki_mean_ms),
            opt_real(t.iki_stddev_ms),
            opt_real(t.iki_cv),
            text(
                &t.iki_list_ms
                    .iter()
                    .map(u64::to_string)
                    .collect::<Vec<_>>()
                    .join(";"),
            ),
            Cell::Real(t.mouse_path_px),
            int(t.mouse_event_count),
        ]
    }
}

/// One message's telemetry inputs, rebuilt from the log.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageWindow {
    pub session_seq: u64,
    pub author: ParticipantId,
    pub window: EventWindow,
    pub text: String,
}

#[derive(Default)]
struct Track {
    connected: bool,
    offset: Millis,
    last_client: Option<Millis>,
    events: Vec<InputEvent>,
    anchors: Vec<Millis>,
}

/// Scans raw records and rebuilds the input window behind every message.
pub fn reconstruct_windows(records: &[EventRecord]) -> Result<Vec<MessageWindow>, ExportError> {
    let mut tracks: std::collections::BTreeMap<ParticipantId, Track> = Default::default();
    let mut out = Vec::new();
    let corrupt = |rec: &EventRecord, reason: String| ExportError::CorruptLog {
        record_seq: rec.record_seq,
        reason,
    };
    for rec in records {
        let ts = rec.server_ts_ms;
        match &rec.payload {
            EventPayload::SessionCreated { roster, .. } => {
                for p in roster {
                    tracks.insert(p.participant_id.clone(), Track::default());
                }
            }
            EventPayload::Join {
                participant_id,
                hello_client_ts_ms: hello,
            } => {
                let t = tracks
                    .get_mut(participant_id)
                    .ok_or_else(|| corrupt(rec, "join by unknown participant".into()))?;
                if t.last_client.is_some_and(|l| *hello < l) {
                    t.events.clear();
                    t.anchors.clear();
                    t.last_client = None;
                }
                t.connected = true;
                t.offset = ts - hello;
                t.anchors.push(*hello);
                t.last_client = Some(t.last_client.map_or(*hello, |l| l.max(*hello)));
            }
            EventPayload::Leave { participant_id, .. } => {
                if let Some(t) = tracks.get_mut(participant_id) {
                    t.connected = false;
                }
            }
            EventPayload::InputEvent {
                participant_id,
                event,
            } => {
                let t = tracks
                    .get_mut(participant_id)
                    .ok_or_else(|| corrupt(rec, "input by unknown participant".into()))?;
                t.last_client = Some(event.client_ts_ms);
                t.events.push(event.clone());
            }
            EventPayload::Message(m) => {
                let t = tracks
                    .get_mut(&m.author_participant_id)
                    .ok_or_else(|| corrupt(rec, "message by unknown participant".into()))?;
                let events = std::mem::take(&mut t.events);
                let start = window_start(&t.anchors, &events, m.submit_ts_client_ms);
                let window = EventWindow::new(events, start, m.submit_ts_client_ms)
                    .map_err(|e| corrupt(rec, e.to_string()))?;
                t.anchors = vec![m.submit_ts_client_ms];
                t.last_client = Some(m.submit_ts_client_ms);
                for (pid, other) in tracks.iter_mut() {
                    if *pid != m.author_participant_id && other.connected {
                        other.anchors.push(ts - other.offset);
                    }
                }
                out.push(MessageWindow {
                    session_seq: m.session_seq,
                    author: m.author_participant_id.clone(),
                    window,
                    text: m.text_original.clone(),
                });
            }
            _ => {}
        }
    }
    Ok(out)
}

fn replay(records: &[EventRecord]) -> Result<SessionState, ExportError> {
    SessionState::replay(records).map_err(|e| ExportError::CorruptLog {
        record_seq: e.record_seq,
        reason: e.reason,
    })
}

pub fn export_rows(records: &[EventRecord]) -> Result<Vec<ExportRow>, ExportError> {
    let state = replay(records)?;
    let windows = reconstruct_windows(records)?;
    state
        .messages
        .iter()
        .zip(windows)
        .map(|(m, w)| {
            if w.session_seq != m.session_seq {
                return Err(ExportError::CorruptLog {
                    record_seq: 0,
                    reason: format!("window for message {} out of order", m.session_seq),
                });
            }
            let kind = state
                .roster
                .get(&m.author_participant_id)
                .map(|e| e.participant.kind);
            Ok(ExportRow {
                session_id: state.session_id().to_string(),
                session_seq: m.session_seq,
                message_id: m.message_id.to_string(),
                author_participant_id: m.author_participant_id.to_string(),
                author_display_name: m.author_identity.display_name.clone(),
                author_role_label: m.author_identity.role_label.clone(),
                author_kind: kind
                    .and_then(|k| serde_json::to_value(k).ok())
                    .and_then(|v| v.as_str().map(str::to_owned))
                    .unwrap_or_default(),
                submit_ts_client_ms: m.submit_ts_client_ms,
                submit_ts_server_ms: m.submit_ts_server_ms,
                text_original: m.text_original.clone(),
                text_current: m.text_current.clone(),
                edit_count: m.edit_count() as u64,
                rating_latest: m.rating_latest(),
                comment_concat: m.comments().collect::<Vec<_>>().join(" | "),
                telemetry: summarize(&w.window, &w.text),
            })
        })
        .collect()
}

pub fn header_cells() -> Vec<Cell> {
    COLUMNS.iter().map(|c| Cell::Text((*c).to_owned())).collect()
}

/// CSV: UTF-8, RFC 4180 quoting, LF line endings, header first.
pub fn write_csv(rows: &[ExportRow]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .quote_style(csv::QuoteStyle::Necessary)
        .from_writer(Vec::new());
    w.write_record(COLUMNS).expect("in-memory csv");
    for row in rows {
        w.write_record(row.cells().iter().map(Cell::render))
            .expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

pub fn write_xlsx(rows: &[ExportRow]) -> Vec<u8> {
    let mut table = vec![header_cells()];
    table.extend(rows.iter().map(ExportRow::cells));
    xlsx::write_workbook(SHEET_NAME, &table)
}

/// Deterministic export of a complete log.
pub fn export_session(records: &[EventRecord], format: ExportFormat) -> Result<Vec<u8>, ExportError> {
    let rows = export_rows(records)?;
    Ok(match format {
        ExportFormat::Csv => write_csv(&rows),
        ExportFormat::Xlsx => write_xlsx(&rows),
    })
}

/// One canonical line per record, in record order.
pub fn export_raw_events(records: &[EventRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        out.extend(encode_frame(r));
        out.push(b'\n');
    }
    out
}

pub fn import_raw_events(bytes: &[u8]) -> Result<Vec<EventRecord>, DecodeError> {
    bytes
        .split(|&b| b == b'\n')
        .filter(|l| !l.is_empty())
        .map(decode_frame)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub session_seq: u64,
    pub field: &'static str,
    pub stored: String,
    pub recomputed: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "message {}: {} stored {} but log yields {}",
            self.session_seq, self.field, self.stored, self.recomputed
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VerifyReport {
    pub records: usize,
    pub messages: usize,
    pub violations: Vec<Violation>,
}

impl VerifyReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

fn compare(seq: u64, stored: &TelemetrySummary, fresh: &TelemetrySummary, out: &mut Vec<Violation>) {
    macro_rules! check {
        ($($field:ident),*) => {$(
            if stored.$field != fresh.$field {
                out.push(Violation {
                    session_seq: seq,
                    field: stringify!($field),
                    stored: format!("{:?}", stored.$field),
                    recomputed: format!("{:?}", fresh.$field),
                });
            }
        )*};
    }
    check!(
        pause_before_ms,
        typing_duration_ms,
        char_count,
        keystroke_count,
        erase_count,
        speed_cps,
        iki_mean_ms,
        iki_stddev_ms,
        iki_cv,
        iki_list_ms,
        mouse_path_px,
        mouse_event_count
    );
}

/// Replays the log and checks every stored telemetry summary against a
/// recomputation from the raw events.
pub fn verify_log(records: &[EventRecord]) -> Result<VerifyReport, ExportError> {
    let state = replay(records)?;
    let windows = reconstruct_windows(records)?;
    let mut report = VerifyReport {
        records: records.len(),
        messages: state.messages.len(),
        violations: Vec::new(),
    };
    if windows.len() != state.messages.len() {
        return Err(ExportError::CorruptLog {
            record_seq: 0,
            reason: "message count differs between replay and scan".into(),
        });
    }
    for (m, w) in state.messages.iter().zip(&windows) {
        let fresh = summarize(&w.window, &w.text);
        compare(m.session_seq, &m.telemetry, &fresh, &mut report.violations);
    }
    Ok(report)
}
