use std::path::{Path, PathBuf};

/// Errors raised by file formats, drivers and the service.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("unsupported raster format: {0}")]
    Format(String),
    #[error(transparent)]
    Core(#[from] hiresfill_core::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("pairing: {0}")]
    Pairing(String),
    #[error("votes: {0}")]
    Votes(String),
    #[error("config: {0}")]
    Config(String),
    #[error("training diverged at step {step} ({detail}); state saved to {}", checkpoint.display())]
    Diverged { step: u64, detail: String, checkpoint: PathBuf },
    #[error("validation: {0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

pub(crate) fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> Error + '_ {
    move |source| Error::Json { path: path.to_path_buf(), source }
}
