use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid event: {0}")]
    InvalidEvent(String),

    #[error("window [{start}, {end}) lies outside the stream span [{span_start}, {span_end}]")]
    WindowOutOfSpan {
        start: i64,
        end: i64,
        span_start: i64,
        span_end: i64,
    },

    #[error("invalid window [{start}, {end}): start must precede end")]
    EmptyWindow { start: i64, end: i64 },

    #[error("invalid rate schedule: {0}")]
    Schedule(String),

    #[error("timestamp {t} us is not on the event-frame clock grid: {reason}")]
    OffGrid { t: i64, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("time {t} us is outside [0, {duration}] us")]
    TimeOutOfRange { t: i64, duration: i64 },

    #[error("invalid scene: {0}")]
    Scene(String),

    #[error("invalid box: {0}")]
    BadBox(String),

    #[error("timestamp mismatch at index {index}: prediction {pred} us vs ground truth {gt} us")]
    TimestampMismatch { index: usize, pred: i64, gt: i64 },

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
