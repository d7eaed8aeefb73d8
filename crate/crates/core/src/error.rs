//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by what went wrong rather than where: `Config` and
/// `Validation` are caller mistakes, `Parse`/`Io`/`Integrity` are data
/// problems, `Shape` and `Degenerate` are numeric/geometric preconditions,
/// and `Divergence` aborts a training run that produced non-finite losses.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("precondition not met: {0}")]
    Precondition(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable, coarse category name used for CLI exit-code mapping.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Parse(_) | Error::Json(_) => "parse",
            Error::Validation(_) | Error::Degenerate(_) | Error::Shape(_) => "validation",
            Error::Config(_) | Error::Precondition(_) => "config",
            Error::Integrity(_) | Error::Io(_) | Error::Image(_) => "io",
            Error::Divergence(_) => "divergence",
        }
    }
}
