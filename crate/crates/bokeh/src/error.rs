use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] bokeh_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("checkpoint {section}: {reason}")]
    Checkpoint { section: String, reason: String },
    #[error("config {path}: {reason}")]
    Config { path: PathBuf, reason: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("{0}")]
    Usage(String),
}

impl AppError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io { path: path.into(), source }
    }

    pub(crate) fn ckpt(section: impl Into<String>, reason: impl Into<String>) -> Self {
        AppError::Checkpoint { section: section.into(), reason: reason.into() }
    }
}

pub type Result<T, E = AppError> = std::result::Result<T, E>;
