//! Append-only session logs.
//!
//! On disk a log is one file per session, `<data_dir>/<session_id>.log`, with
//! one canonically encoded [`EventRecord`] per line. A torn final line left by
//! a crash is truncated on open.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::model::{EventRecord, SessionId};
use crate::wire::{decode_frame, encode_frame};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("SEQ_GAP: expected record {expected}, got {got}")]
    SeqGap { expected: u64, got: u64 },
    #[error("record {0} already stored with different content")]
    Conflict(u64),
    #[error("record belongs to session {got}, log is for {expected}")]
    WrongSession { expected: SessionId, got: SessionId },
    #[error("STORAGE_FAILURE: {0}")]
    Storage(#[from] io::Error),
    #[error("corrupt log at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Appended {
    Stored,
    /// The identical record was already present; nothing was written.
    Duplicate,
}

/// In-memory log of one session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionLog {
    session_id: Option<SessionId>,
    records: Vec<EventRecord>,
}

impl SessionLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: Vec<EventRecord>) -> Result<Self, StoreError> {
        let mut log = Self::new();
        for r in records {
            log.append(r)?;
        }
        Ok(log)
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn check(&self, record: &EventRecord) -> Result<Option<Appended>, StoreError> {
        if let Some(sid) = &self.session_id {
            if *sid != record.session_id {
                return Err(StoreError::WrongSession {
                    expected: sid.clone(),
                    got: record.session_id.clone(),
                });
            }
        }
        let next = self.records.len() as u64 + 1;
        match record.record_seq {
            s if s == next => Ok(None),
            s if s >= 1 && s < next => {
                if self.records[s as usize - 1] == *record {
                    Ok(Some(Appended::Duplicate))
                } else {
                    Err(StoreError::Conflict(s))
                }
            }
            s => Err(StoreError::SeqGap {
                expected: next,
                got: s,
            }),
        }
    }

    pub fn append(&mut self, record: EventRecord) -> Result<Appended, StoreError> {
        if let Some(dup) = self.check(&record)? {
            return Ok(dup);
        }
        self.session_id.get_or_insert_with(|| record.session_id.clone());
        self.records.push(record);
        Ok(Appended::Stored)
    }
}

/// A [`SessionLog`] mirrored to an append-only file.
#[derive(Debug)]
pub struct FileLog {
    path: PathBuf,
    file: File,
    log: SessionLog,
    fsync: bool,
}

pub fn log_path(data_dir: &Path, session_id: &SessionId) -> PathBuf {
    data_dir.join(format!("{session_id}.log"))
}

/// Parses log bytes. Returns the records and the byte length of the valid
/// prefix; an undecodable or unterminated final line counts as torn.
fn parse_log(bytes: &[u8]) -> Result<(Vec<EventRecord>, usize), StoreError> {
    let mut records = Vec::new();
    let mut valid = 0;
    let mut lines = bytes.split_inclusive(|&b| b == b'\n').enumerate().peekable();
    while let Some((i, line)) = lines.next() {
        let is_last = lines.peek().is_none();
        let Some(body) = line.strip_suffix(b"\n") else {
            break; // unterminated tail
        };
        match decode_frame::<EventRecord>(body) {
            Ok(r) => records.push(r),
            Err(_) if is_last => break,
            Err(e) => {
                return Err(StoreError::Corrupt {
                    line: i + 1,
                    reason: e.to_string(),
                })
            }
        }
        valid += line.len();
    }
    Ok((records, valid))
}

/// Reads a log file without modifying it. A torn tail is ignored.
pub fn read_log_file(path: &Path) -> Result<Vec<EventRecord>, StoreError> {
    let bytes = std::fs::read(path)?;
    let (records, _) = parse_log(&bytes)?;
    SessionLog::from_records(records.clone())?;
    Ok(records)
}

impl FileLog {
    /// Creates a new, empty log file. Fails if it already exists.
    pub fn create(path: impl Into<PathBuf>, fsync: bool) -> Result<Self, StoreError> {
        let path = path.into();
        let file = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(&path)?;
        Ok(Self {
            path,
            file,
            log: SessionLog::new(),
            fsync,
        })
    }

    /// Opens an existing log, truncating a torn final line.
    pub fn open(path: impl Into<PathBuf>, fsync: bool) -> Result<Self, StoreError> {
        let path = path.into();
        let mut file = OpenOptions::new().read(true).write(true).open(&path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let (records, valid) = parse_log(&bytes)?;
        if valid < bytes.len() {
            file.set_len(valid as u64)?;
            file.sync_data()?;
        }
        file.seek(SeekFrom::End(0))?;
        Ok(Self {
            path,
            file,
            log: SessionLog::from_records(records)?,
            fsync,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn records(&self) -> &[EventRecord] {
        self.log.records()
    }

    /// Durable (written, and synced when `fsync` is set) before returning.
    pub fn append(&mut self, record: EventRecord) -> Result<Appended, StoreError> {
        if let Some(dup) = self.log.check(&record)? {
            return Ok(dup);
        }
        let mut line = encode_frame(&record);
        line.push(b'\n');
        self.file.write_all(&line)?;
        if self.fsync {
            self.file.sync_data()?;
        }
        self.log.append(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EventPayload, LeaveReason};

    fn rec(seq: u64) -> EventRecord {
        EventRecord {
            record_seq: seq,
            session_id: "s".into(),
            server_ts_ms: seq as i64 * 10,
            payload: EventPayload::Leave {
                participant_id: "p".into(),
                reason: LeaveReason::Bye,
            },
        }
    }

    #[test]
    fn append_to_empty() {
        let mut log = SessionLog::new();
        assert_eq!(log.append(rec(1)).unwrap(), Appended::Stored);
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn gap_rejected() {
        let mut log = SessionLog::from_records((1..=3).map(rec).collect()).unwrap();
        assert!(matches!(
            log.append(rec(5)),
            Err(StoreError::SeqGap { expected: 4, got: 5 })
        ));
        assert!(matches!(log.append(rec(0)), Err(StoreError::SeqGap { .. })));
    }

    #[test]
    fn duplicate_is_idempotent() {
        let mut log = SessionLog::new();
        log.append(rec(1)).unwrap();
        assert_eq!(log.append(rec(1)).unwrap(), Appended::Duplicate);
        assert_eq!(log.len(), 1);
        let mut other = rec(1);
        other.server_ts_ms = 99;
        assert!(matches!(log.append(other), Err(StoreError::Conflict(1))));
    }

    #[test]
    fn other_session_rejected() {
        let mut log = SessionLog::new();
        log.append(rec(1)).unwrap();
        let mut r = rec(2);
        r.session_id = "t".into();
        assert!(matches!(log.append(r), Err(StoreError::WrongSession { .. })));
    }

    #[test]
    fn file_log_persists_and_reopens() {
        let dir = tempfile::tempdir().unwrap();
        let path = log_path(dir.path(), &"s".into());
        let mut f = FileLog::create(&path, true).unwrap();
        for s in 1..=3 {
            f.append(rec(s)).unwrap();
        }
        assert_eq!(f.append(rec(2)).unwrap(), Appended::Duplicate);
        drop(f);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        let mut f = FileLog::open(&path, false).unwrap();
        assert_eq!(f.records().len(), 3);
        f.append(rec(4)).unwrap();
        assert_eq!(read_log_file(&path).unwrap().len(), 4);
        assert!(FileLog::create(&path, false).is_err());
    }

    #[test]
    fn torn_tail_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.log");
        let mut f = FileLog::create(&path, false).unwrap();
        f.append(rec(1)).unwrap();
        f.append(rec(2)).unwrap();
        drop(f);
        let mut raw = OpenOptions::new().append(true).open(&path).unwrap();
        raw.write_all(br#"{"kind":"LEAVE","payl"#).unwrap();
        drop(raw);
        assert_eq!(read_log_file(&path).unwrap().len(), 2);
        let mut f = FileLog::open(&path, false).unwrap();
        assert_eq!(f.records().len(), 2);
        f.append(rec(3)).unwrap();
        drop(f);
        assert_eq!(read_log_file(&path).unwrap().len(), 3);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.log");
        let good = String::from_utf8(encode_frame(&rec(1))).unwrap();
        std::fs::write(&path, format!("{good}\ngarbage\n{good}\n")).unwrap();
        assert!(matches!(
            FileLog::open(&path, false),
            Err(StoreError::Corrupt { line: 2, .. })
        ));
    }
}
