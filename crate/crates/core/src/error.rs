use std::path::PathBuf;

use tencore::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Tensor {
        path: String,
        #[source]
        source: TensorError,
    },
    #[error("non-finite value produced by `{op}` in {path}")]
    Numerical { path: String, op: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    /// Attach a layer path to a tensor failure, turning NaN/Inf into
    /// [`Error::Numerical`].
    pub fn at(path: &str, source: TensorError) -> Self {
        match source {
            TensorError::NonFinite { op } => Error::Numerical {
                path: path.to_string(),
                op: op.to_string(),
            },
            source => Error::Tensor {
                path: path.to_string(),
                source,
            },
        }
    }
}

pub(crate) trait AtPath<T> {
    fn at(self, path: &str) -> Result<T>;
}

impl<T> AtPath<T> for std::result::Result<T, TensorError> {
    fn at(self, path: &str) -> Result<T> {
        self.map_err(|e| Error::at(path, e))
    }
}
