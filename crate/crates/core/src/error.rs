use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum TafError {
    #[error("format error: {0}")]
    Format(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate intensity: {0}")]
    DegenerateIntensity(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("metric undefined: {0}")]
    MetricUndefined(String),
    #[error("test undefined: {0}")]
    TestUndefined(String),
    #[error("correlation undefined: {0}")]
    CorrelationUndefined(String),
    #[error("state error: {0}")]
    State(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Nn(#[from] tafnet_nn::NnError),
}

pub type Result<T> = std::result::Result<T, TafError>;

/// Wraps an IO error with the path it concerns.
pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TafError + '_ {
    move |source| TafError::Io { path: path.to_path_buf(), source }
}
