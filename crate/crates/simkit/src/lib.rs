//! Scripted simulated clients and operator tooling for the parley chat
//! research platform.
//!
//! - [`scenario`]: scenario files and script validation.
//! - [`client`]: runs one script over a real WebSocket.
//! - [`simulate`]: creates a session and runs a whole scenario.
//! - [`transcript`]: recorded frames and checks over them.
//! - [`admin`]: admin API client.
//! - [`offline`]: export and verification of log files.

pub mod admin;
pub mod client;
pub mod error;
pub mod offline;
pub mod scenario;
pub mod simulate;
pub mod transcript;

pub use admin::AdminClient;
pub use client::{run_script, RunOptions, Target};
pub use error::{Category, SimError};
pub use scenario::{Action, AnnotateKind, ParticipantScript, Scenario, Step};
pub use simulate::{simulate, SimulationReport};
pub use transcript::{fold_keystrokes, Direction, Entry, Transcript};
