use std::path::PathBuf;

use eclf_nn::NnError;

use crate::vae::Checkpoint;

#[derive(Debug, thiserror::Error)]
pub enum EclfError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("config: {key}: {message}")]
    Config { key: String, message: String },
    #[error("factor {field} = {value} is outside {range}")]
    Factor { field: &'static str, value: String, range: &'static str },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged {
        iteration: u64,
        reason: String,
        last_good: Box<Checkpoint>,
    },
    #[error("explanation failed: {0}")]
    Explain(String),
    #[error("{0}")]
    Invalid(String),
}

impl EclfError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EclfError::Io { path: path.into(), source }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        EclfError::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = EclfError> = std::result::Result<T, E>;
