use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Core(#[from] spanedit_core::Error),
    #[error("tensor backend error")]
    Tensor(#[from] candle_core::Error),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("{what} became non-finite at step {step}")]
    NonFiniteLoss { what: &'static str, step: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("input of {samples} samples is shorter than one {stride}-sample frame")]
    TooShort { samples: usize, stride: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sequence of {len} positions exceeds the model maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    }
}
