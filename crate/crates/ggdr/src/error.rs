use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// Invalid configuration (bad hyperparameter, impossible architecture, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid runtime input (shape mismatch, non-finite values, empty batch, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Training diverged or produced non-finite losses.
    #[error("training aborted: {0}")]
    Diverged(String),

    /// Checkpoint file is corrupt or incompatible with the current config.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Dataset could not be loaded.
    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
