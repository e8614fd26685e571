use std::io;

/// Errors produced by the compression engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error(
        "singular system: normal matrix is not positive definite (pivot {pivot}); use lambda > 0"
    )]
    Singular { pivot: usize },

    #[error("degenerate target: every channel has zero variance")]
    DegenerateTarget,

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("value out of representable range: {0}")]
    OutOfRange(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload at layer {layer}")]
    Truncated { layer: usize },

    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("incompatible predictor set: {0}")]
    Incompatible(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Singular { .. } => "singular",
            Error::DegenerateTarget => "degenerate_target",
            Error::NonFinite { .. } => "non_finite",
            Error::OutOfRange(_) => "out_of_range",
            Error::Format(_) => "format",
            Error::Truncated { .. } => "truncated",
            Error::Checksum { .. } => "checksum",
            Error::Incompatible(_) => "incompatible",
            Error::Contract(_) => "contract",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
