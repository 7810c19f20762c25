//! Operations on session log files, no server involved.

use std::path::{Path, PathBuf};

use parley_core::export::{export_session, verify_log, ExportFormat, VerifyReport};
use parley_core::store::{log_path, read_log_file};
use parley_core::{redrive, EventRecord, SessionId, SessionState};

use crate::error::SimError;

/// `arg` is a log file path, or a session id looked up in `data_dir`.
pub fn resolve_log(arg: &str, data_dir: Option<&Path>) -> PathBuf {
    let direct = PathBuf::from(arg);
    if direct.is_file() {
        return direct;
    }
    match data_dir {
        Some(dir) => log_path(dir, &SessionId::new(arg)),
        None => direct,
    }
}

pub fn load_log(path: &Path) -> Result<Vec<EventRecord>, SimError> {
    if !path.exists() {
        return Err(SimError::io(path, std::io::ErrorKind::NotFound.into()));
    }
    read_log_file(path).map_err(|e| SimError::CorruptLog(format!("{}: {e}", path.display())))
}

pub fn export_log(records: &[EventRecord], format: ExportFormat) -> Result<Vec<u8>, SimError> {
    export_session(records, format).map_err(|e| SimError::CorruptLog(e.to_string()))
}

#[derive(Debug)]
pub struct Verification {
    pub report: VerifyReport,
    /// Where re-running the logged operations produced a different record.
    pub divergence: Option<String>,
}

impl Verification {
    pub fn is_ok(&self) -> bool {
        self.report.is_ok() && self.divergence.is_none()
    }

    pub fn summary(&self) -> String {
        let mut lines = vec![format!(
            "{} records, {} messages, {} telemetry violations",
            self.report.records,
            self.report.messages,
            self.report.violations.len()
        )];
        lines.extend(self.report.violations.iter().map(|v| format!("  {v}")));
        if let Some(d) = &self.divergence {
            lines.push(format!("  {d}"));
        }
        lines.join("\n")
    }
}

/// Replays the log, re-executes every logged operation against a fresh
/// engine, and recomputes every telemetry summary from the raw events.
pub fn verify_records(records: &[EventRecord]) -> Result<Verification, SimError> {
    SessionState::replay(records).map_err(|e| SimError::CorruptLog(e.to_string()))?;
    let report = verify_log(records).map_err(|e| SimError::CorruptLog(e.to_string()))?;
    let divergence = redrive(records)
        .err()
        .map(|d| format!("record {} not reproduced: {}", d.record_seq, d.reason));
    Ok(Verification { report, divergence })
}
