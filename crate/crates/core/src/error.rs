use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure category, used by the CLI for exit codes and by the
/// service for HTTP status mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Input,
    NotFound,
    Config,
    Backend,
    Internal,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("entity `{entity}` not present{}", frame.map(|t| format!(" in frame {t}")).unwrap_or_default())]
    MissingEntity { entity: String, frame: Option<usize> },

    #[error("{0} not found")]
    NotFound(String),

    #[error("degenerate mask: {pixels} pixels, at least {min} required")]
    DegenerateMask { pixels: usize, min: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid `{field}`: {message}")]
    InvalidField { field: String, message: String },

    #[error("invalid input in frame {frame}: {message}")]
    FrameInput { frame: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidField { field: field.into(), message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::MissingEntity { .. } | Error::NotFound(_) => ErrorKind::NotFound,
            Error::DegenerateMask { .. }
            | Error::Input(_)
            | Error::FrameInput { .. }
            | Error::InvalidField { .. }
            | Error::Decode(_)
            | Error::Json(_) => ErrorKind::Input,
            Error::Config(_) => ErrorKind::Config,
            Error::Backend(_) => ErrorKind::Backend,
            // Missing files are the caller's fault; anything else on disk is ours.
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                ErrorKind::Input
            }
            Error::Image { .. } => ErrorKind::Input,
            Error::Io { .. } => ErrorKind::Internal,
        }
    }
}
