use thiserror::Error;

/// Crate-wide error type. `Config` covers every precondition violation the
/// operations define (shape mismatches, bad parameters, unknown keys);
/// `Runtime` covers failures that occur on valid inputs.
#[derive(Error, Debug)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("runtime error: {0}")]
    Runtime(String),

    #[error("non-finite loss at step {step}: {report}")]
    NonFiniteLoss { step: u64, report: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for building a `Config` error.
pub fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
