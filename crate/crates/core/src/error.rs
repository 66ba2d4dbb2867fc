use std::path::PathBuf;

use hanet_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(TensorError),
}

impl CoreError {
    /// Divergence, non-finite values or a failed gradient check.
    pub fn is_numerical(&self) -> bool {
        matches!(self, CoreError::Numerical(_) | CoreError::Tensor(TensorError::NonFinite(_)))
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.into(), source }
    }
}

impl From<TensorError> for CoreError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite(m) => CoreError::Numerical(m),
            other => CoreError::Tensor(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
