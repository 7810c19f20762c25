//! Gateway configuration.
//!
//! The config file is TOML with these keys (all optional except where noted):
//!
//! ```toml
//! bind_address = "127.0.0.1:8080"
//! data_dir = "./data"
//! admin_token = "change-me"      # required, here or via CBK_ADMIN_TOKEN
//! session_tick_ms = 500
//! queue_capacity = 1024
//! fsync = true
//! static_dir = "./web"
//!
//! [tls]
//! cert = "cert.pem"
//! key = "key.pem"
//! ```
//!
//! `CBK_BIND`, `CBK_DATA_DIR` and `CBK_ADMIN_TOKEN` override the file.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use parley_core::engine::DEFAULT_TICK_MS;

pub const DEFAULT_QUEUE_CAPACITY: usize = 1024;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config is not valid TOML: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("data_dir {path} is not writable: {source}")]
    DataDir {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct TlsConfig {
    pub cert: PathBuf,
    pub key: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    #[serde(default = "default_bind")]
    pub bind_address: String,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default)]
    pub tls: Option<TlsConfig>,
    #[serde(default)]
    pub admin_token: String,
    #[serde(default = "default_tick")]
    pub session_tick_ms: u64,
    /// Frames buffered per connection before it is dropped as too slow.
    #[serde(default = "default_queue")]
    pub queue_capacity: usize,
    #[serde(default = "default_fsync")]
    pub fsync: bool,
    /// Directory served at `/`. A small placeholder page is served when unset.
    #[serde(default)]
    pub static_dir: Option<PathBuf>,
}

fn default_bind() -> String {
    "127.0.0.1:8080".into()
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("data")
}

fn default_tick() -> u64 {
    DEFAULT_TICK_MS
}

fn default_queue() -> usize {
    DEFAULT_QUEUE_CAPACITY
}

fn default_fsync() -> bool {
    true
}

impl GatewayConfig {
    pub fn new(data_dir: impl Into<PathBuf>, admin_token: impl Into<String>) -> Self {
        Self {
            bind_address: default_bind(),
            data_dir: data_dir.into(),
            tls: None,
            admin_token: admin_token.into(),
            session_tick_ms: DEFAULT_TICK_MS,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            fsync: true,
            static_dir: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Applies `CBK_*` overrides from `lookup` (normally `std::env::var`).
    pub fn with_overrides(mut self, lookup: impl Fn(&str) -> Option<String>) -> Self {
        if let Some(v) = lookup("CBK_BIND") {
            self.bind_address = v;
        }
        if let Some(v) = lookup("CBK_DATA_DIR") {
            self.data_dir = v.into();
        }
        if let Some(v) = lookup("CBK_ADMIN_TOKEN") {
            self.admin_token = v;
        }
        self
    }

    pub fn with_env(self) -> Self {
        self.with_overrides(|k| std::env::var(k).ok())
    }

    /// Checks field invariants and that `data_dir` exists (creating it) and
    /// accepts writes.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.session_tick_ms == 0 {
            return Err(ConfigError::Invalid("session_tick_ms must be > 0".into()));
        }
        if self.queue_capacity == 0 {
            return Err(ConfigError::Invalid("queue_capacity must be > 0".into()));
        }
        if self.admin_token.is_empty() {
            return Err(ConfigError::Invalid("admin_token must be set".into()));
        }
        let probe = self.data_dir.join(".write-probe");
        std::fs::create_dir_all(&self.data_dir)
            .and_then(|_| std::fs::write(&probe, b""))
            .and_then(|_| std::fs::remove_file(&probe))
            .map_err(|source| ConfigError::DataDir {
                path: self.data_dir.clone(),
                source,
            })
    }
}
