use std::io;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] mdvsc_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Image { path: PathBuf, source: image::ImageError },
    /// Bad configuration or arguments; the CLI exits with status 2.
    #[error("{0}")]
    Usage(String),
    #[error("{}: {message}", path.display())]
    Data { path: PathBuf, message: String },
    #[error("checkpoint {}: {message}", path.display())]
    Checkpoint { path: PathBuf, message: String },
    #[error("{}: {message}", path.display())]
    Csv { path: PathBuf, message: String },
    #[error("training diverged at step {step}; model state saved to {}", path.display())]
    Diverged { step: u64, path: PathBuf },
    #[error("plot {}: {message}", path.display())]
    Plot { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Self {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
