use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("scenario already terminated ({0})")]
    TerminalScenario(&'static str),

    #[error("sensor distance {0} outside [0, sensor_range]")]
    DistanceOutOfRange(f64),

    #[error("non-finite value detected: {0}")]
    NonFinite(String),

    #[error("at least one demonstration is required")]
    NoDemonstrations,

    #[error("degenerate projection direction (|mu - mu_bar| = {0:e})")]
    DegenerateProjection(f64),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("config hash mismatch: file has {found}, simulator has {expected}")]
    ConfigHash { found: String, expected: String },

    #[error("file is truncated or corrupted: {0}")]
    Corrupted(String),

    #[error("replay mismatch at step {step}: {detail}")]
    ReplayMismatch { step: usize, detail: String },

    #[error("scripted expert misconfigured: {rejected} collisions out of {attempted} scenarios")]
    ExpertMisconfigured { rejected: usize, attempted: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("{path}: {source}")]
    File { path: PathBuf, source: io::Error },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse { line, message: message.into() }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::File { path: path.into(), source }
    }
}
