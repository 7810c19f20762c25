//! Core of the parley chat research platform.
//!
//! - [`model`]: domain values and their invariants.
//! - [`wire`]: frame codec and per-viewer visibility rules.
//! - [`engine`]: the event-sourced per-session state machine.
//! - [`telemetry`]: keystroke and mouse metrics per message.
//! - [`store`]: append-only session logs.
//! - [`export`]: CSV/XLSX/raw export and log verification.

pub mod engine;
pub mod export;
pub mod model;
pub mod store;
pub mod telemetry;
pub mod wire;
pub mod xlsx;

pub use engine::{derive_typing_state, redrive, Delivery, Divergence, Effects, EngineError, JoinOutcome, SessionState};
pub use export::{export_raw_events, export_session, verify_log, ExportError, ExportFormat};
pub use model::*;
pub use store::{FileLog, SessionLog, StoreError};
pub use telemetry::{summarize, EventWindow};
pub use wire::{
    decode_frame, encode_frame, visibility_filter, ClientBody, ClientFrame, DecodeError, ErrorCode,
    ServerBody, ServerFrame, WireFrame,
};
