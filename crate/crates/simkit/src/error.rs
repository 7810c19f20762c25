use std::io;
use std::path::PathBuf;

use parley_core::ErrorCode;

/// Failure categories, printed as `error[CATEGORY]` and mapped to exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    ConnectFailed,
    ScriptInvalid,
    Unauthorized,
    ServerError,
    Io,
    VerifyFailed,
    CorruptLog,
    Config,
    Timeout,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ConnectFailed => "CONNECT_FAILED",
            Self::ScriptInvalid => "SCRIPT_INVALID",
            Self::Unauthorized => "UNAUTHORIZED",
            Self::ServerError => "SERVER_ERROR",
            Self::Io => "IO",
            Self::VerifyFailed => "VERIFY_FAILED",
            Self::CorruptLog => "CORRUPT_LOG",
            Self::Config => "CONFIG",
            Self::Timeout => "TIMEOUT",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Self::ConnectFailed => 3,
            Self::ScriptInvalid => 4,
            Self::Unauthorized => 5,
            Self::ServerError => 6,
            Self::Io => 7,
            Self::VerifyFailed => 8,
            Self::CorruptLog => 9,
            Self::Config => 10,
            Self::Timeout => 11,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("cannot reach {url}: {reason}")]
    ConnectFailed { url: String, reason: String },
    #[error("{0}")]
    ScriptInvalid(String),
    #[error("{0}")]
    Unauthorized(String),
    /// The server answered, but not with what was asked for.
    #[error("{code}: {detail}")]
    Server { code: String, detail: String },
    /// A join was refused with an ERROR frame.
    #[error("{participant}: join refused with {code:?}: {detail}")]
    Refused {
        participant: String,
        code: ErrorCode,
        detail: String,
    },
    #[error("{participant}: {what}")]
    Timeout { participant: String, what: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    VerifyFailed(String),
    #[error("{0}")]
    CorruptLog(String),
    #[error("{0}")]
    Config(String),
}

impl SimError {
    pub fn category(&self) -> Category {
        match self {
            Self::ConnectFailed { .. } => Category::ConnectFailed,
            Self::ScriptInvalid(_) => Category::ScriptInvalid,
            Self::Unauthorized(_) => Category::Unauthorized,
            Self::Refused { code, .. } if *code == ErrorCode::AuthFailed => Category::Unauthorized,
            Self::Server { .. } | Self::Refused { .. } => Category::ServerError,
            Self::Timeout { .. } => Category::Timeout,
            Self::Io { .. } => Category::Io,
            Self::VerifyFailed(_) => Category::VerifyFailed,
            Self::CorruptLog(_) => Category::CorruptLog,
            Self::Config(_) => Category::Config,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
