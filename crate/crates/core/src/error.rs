use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid span set: {0}")]
    InvalidSpans(String),
    #[error("{found} spans exceed the maximum of {max}")]
    TooManySpans { found: usize, max: usize },
    #[error("malformed rearranged sequence at position {position}: {reason}")]
    MalformedLayout { position: usize, reason: String },
    #[error("inconsistent delay layout: {0}")]
    InconsistentDelay(String),
    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("token {token} out of range for {what} (limit {limit})")]
    TokenOutOfRange {
        what: &'static str,
        token: u32,
        limit: u32,
    },
    #[error("frame count {frames} too small: {reason}")]
    TooFewFrames { frames: usize, reason: &'static str },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("word {index} has no alignment entry")]
    MissingAlignment { index: usize },
    #[error("invalid alignment: {0}")]
    InvalidAlignment(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("zero-energy reference signal")]
    ZeroEnergy,
    #[error("unsupported audio format in {path}: {reason}")]
    UnsupportedAudio { path: PathBuf, reason: String },
    #[error("sample rate mismatch: expected {expected} Hz, got {found} Hz")]
    SampleRateMismatch { expected: u32, found: u32 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("wav error on {path}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn wav_err(path: impl Into<PathBuf>) -> impl FnOnce(hound::Error) -> Error {
    let path = path.into();
    move |source| Error::Wav { path, source }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
