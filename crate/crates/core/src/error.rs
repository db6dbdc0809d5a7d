use voxdet_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("placement failed: {0}")]
    Placement(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("budget exceeded: {0}")]
    Budget(String),
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl AsRef<std::path::Path>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.as_ref().display().to_string();
    move |source| Error::Io { path, source }
}

pub(crate) fn json_err(path: impl AsRef<std::path::Path>) -> impl FnOnce(serde_json::Error) -> Error {
    let path = path.as_ref().display().to_string();
    move |source| Error::Json { path, source }
}
