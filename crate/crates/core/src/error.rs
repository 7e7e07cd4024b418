use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Error, Debug)]
pub enum GcfxError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("validation error in {file} line {line}: {msg}")]
    Validation {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error in {component}: {msg}")]
    Numeric { component: String, msg: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, GcfxError>;

impl GcfxError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        GcfxError::Shape(msg.into())
    }

    pub(crate) fn numeric(component: &str, msg: impl Into<String>) -> Self {
        GcfxError::Numeric {
            component: component.to_string(),
            msg: msg.into(),
        }
    }

    /// Short category label used by the CLI when reporting failures.
    pub fn category(&self) -> &'static str {
        match self {
            GcfxError::Io(_) => "io",
            GcfxError::Format(_) => "format",
            GcfxError::Validation { .. } => "validation",
            GcfxError::Config(_) => "config",
            GcfxError::Shape(_) => "shape",
            GcfxError::Numeric { .. } => "numeric",
            GcfxError::Argument(_) => "argument",
            GcfxError::Checkpoint(_) => "checkpoint",
        }
    }
}
