use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("allocation is empty")]
    EmptyAllocation,

    #[error("malformed entry {entry:?}: {reason}")]
    MalformedEntry { entry: String, reason: String },

    #[error("environment variable {0} is not set")]
    MissingEnv(String),

    #[error("allocation has {hosts} host(s); need at least {needed}")]
    InsufficientNodes { hosts: usize, needed: usize },

    #[error("invalid directory roots: {0}")]
    InvalidRoots(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("request of {memory_mb} MB exceeds node capacity of {capacity_mb} MB")]
    Unsatisfiable { memory_mb: u64, capacity_mb: u64 },

    #[error("unknown node {0}")]
    UnknownNode(String),

    #[error("node {0} is already registered")]
    AlreadyRegistered(String),

    #[error("node {0} must re-register")]
    ReRegisterRequired(String),

    #[error("no alive workers")]
    NoWorkers,

    #[error("{0} not found")]
    NotFound(String),

    #[error("output {0} already exists")]
    OutputExists(PathBuf),

    #[error("malformed record in {file} at offset {offset}")]
    MalformedRecord { file: PathBuf, offset: u64 },

    #[error("missing input {0}")]
    MissingInput(PathBuf),

    #[error("cluster unavailable: {0}")]
    ClusterUnavailable(String),

    #[error("cluster not ready after {0} ms")]
    ReadyTimeout(u64),

    #[error("invalid job spec: {0}")]
    InvalidJobSpec(String),

    #[error("refusing to commit: {0}")]
    CommitRefused(String),

    #[error("job failed: {0}")]
    JobFailed(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("remote error {kind}: {message}")]
    Remote { kind: String, message: String },

    #[error("io error on {path}: {source}")]
    PathIo { path: PathBuf, source: io::Error },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn path_io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
        let path = path.into();
        move |source| Error::PathIo { path, source }
    }

    /// Short machine-readable tag, used as the `kind` of protocol error replies.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyAllocation => "EmptyAllocation",
            Error::MalformedEntry { .. } => "MalformedEntry",
            Error::MissingEnv(_) => "MissingEnv",
            Error::InsufficientNodes { .. } => "InsufficientNodes",
            Error::InvalidRoots(_) => "InvalidRoots",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Unsatisfiable { .. } => "Unsatisfiable",
            Error::UnknownNode(_) => "UnknownNode",
            Error::AlreadyRegistered(_) => "AlreadyRegistered",
            Error::ReRegisterRequired(_) => "ReRegisterRequired",
            Error::NoWorkers => "NoWorkers",
            Error::NotFound(_) => "NotFound",
            Error::OutputExists(_) => "OutputExists",
            Error::MalformedRecord { .. } => "MalformedRecord",
            Error::MissingInput(_) => "MissingInput",
            Error::ClusterUnavailable(_) => "ClusterUnavailable",
            Error::ReadyTimeout(_) => "ReadyTimeout",
            Error::InvalidJobSpec(_) => "InvalidJobSpec",
            Error::CommitRefused(_) => "CommitRefused",
            Error::JobFailed(_) => "JobFailed",
            Error::Protocol(_) => "Protocol",
            Error::Remote { .. } => "Remote",
            Error::PathIo { .. } | Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}
