use std::path::PathBuf;

use factlab_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("sequence of {len} tokens exceeds max_seq {max}")]
    Length { len: usize, max: usize },

    #[error("invalid model config: {0}")]
    ModelConfig(String),

    #[error("hook error: {0}")]
    Hook(String),

    #[error("patch error: {0}")]
    Patch(String),

    #[error("registry error: unknown parameter or module {0:?}")]
    Registry(String),

    #[error("adapter error: {0}")]
    Adapter(String),

    #[error("merge not supported: {0}")]
    UnsupportedMerge(String),

    #[error("world capacity error: {0}")]
    Capacity(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("alignment error: clean prompt has {clean} tokens, corrupted has {corrupted}")]
    Alignment { clean: usize, corrupted: usize },

    #[error("localization failed: no module met the convergence rule")]
    LocalizationFailed,

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("pretraining gate unmet after {steps} steps: F1 accuracy {f1_accuracy:.3}, control accuracy {control_accuracy:.3}")]
    PretrainGate {
        steps: usize,
        f1_accuracy: f64,
        control_accuracy: f64,
    },

    #[error("missing {artifact}: run `factlab {command}` first")]
    MissingArtifact { artifact: PathBuf, command: &'static str },

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.to_string(),
        }
    }
}
