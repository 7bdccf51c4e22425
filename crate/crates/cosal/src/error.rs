use thiserror::Error;

#[derive(Error, Debug)]
pub enum CosalError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CosalError {
    pub fn shape(msg: impl Into<String>) -> Self {
        CosalError::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        CosalError::Invalid(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CosalError::Io { path: path.as_ref().display().to_string(), source }
    }

    pub fn format(path: impl AsRef<std::path::Path>, reason: impl Into<String>) -> Self {
        CosalError::Format { path: path.as_ref().display().to_string(), reason: reason.into() }
    }
}

pub type Result<T> = std::result::Result<T, CosalError>;
