use std::path::PathBuf;

use tafnet::TafError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Taf(#[from] TafError),
    #[error("missing {path}: run the `{stage}` stage first")]
    Dependency { stage: &'static str, path: PathBuf },
    #[error("csv error in {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("image error in {path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn csv(path: impl Into<PathBuf>) -> impl FnOnce(csv::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Csv { path, source }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Taf(TafError::Io { path, source })
    }

    /// Process exit code: 2 for configuration and dependency problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Taf(TafError::Config(_)) | CliError::Dependency { .. } => 2,
            _ => 1,
        }
    }
}
