use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric divergence: {0}")]
    Numeric(String),

    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Short machine-readable tag for the error family.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Argument(_) => "argument",
            Error::Data(_) => "data",
            Error::Shape(_) => "shape",
            Error::Numeric(_) => "numeric",
            Error::MissingInput(_) => "missing-input",
            Error::Checkpoint(_) => "checkpoint",
            Error::Tensor(_) => "tensor",
            Error::Io(_) => "io",
            Error::Image(_) => "image",
        }
    }
}

/// Fails with [`Error::Numeric`] when `value` is NaN or infinite.
pub(crate) fn ensure_finite(value: f64, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "{what} became non-finite ({value})"
        )))
    }
}
