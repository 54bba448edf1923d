use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error classes. The CLI maps each one to a distinct exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Io,
    Protocol,
    Verification,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Io => 3,
            ErrorCategory::Protocol => 4,
            ErrorCategory::Verification => 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("tool `{0}` is already registered")]
    DuplicateTool(String),
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
    #[error("invalid tool id `{0}`")]
    InvalidToolId(String),
    #[error("composite length {len} outside [{min}, {max}]")]
    CompositeLength { len: usize, min: usize, max: usize },
    #[error("action `{0}` is not expandable")]
    NotExpandable(String),
    #[error("unknown action `{0}`")]
    UnknownAction(String),
    #[error("episode already terminated")]
    EpisodeTerminated,
    #[error("cannot build {families} distinct protocols from {available} tools")]
    NotEnoughTools { families: usize, available: usize },
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("trajectory for case {0} is not successful")]
    UnsuccessfulTrajectory(usize),
    #[error("empty pattern")]
    EmptyPattern,
    #[error("group size {0} is below 2")]
    GroupTooSmall(usize),
    #[error("empty action set")]
    EmptyActionSet,
    #[error("rollout step is missing its observation snapshot")]
    MissingSnapshot,
    #[error("params version {params} cannot score snapshot version {snapshot}")]
    VersionMismatch { params: u64, snapshot: u64 },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("policy endpoint: {0}")]
    Protocol(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Io { .. } => ErrorCategory::Io,
            Error::Protocol(_) => ErrorCategory::Protocol,
            Error::Verification(_) => ErrorCategory::Verification,
            Error::Json { .. } | Error::Schema(_) => ErrorCategory::Protocol,
            _ => ErrorCategory::Config,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
