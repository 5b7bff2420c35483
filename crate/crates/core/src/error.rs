use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument was out of range, non-finite, or had the wrong dimension.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A structure could not be built from its inputs.
    #[error("construction failed: {0}")]
    Construction(String),

    /// Misuse of an API, e.g. backpropagating through a detached graph.
    #[error("usage error: {0}")]
    Usage(String),

    /// A broken internal invariant (e.g. mismatched mesh topologies).
    #[error("internal error: {0}")]
    Internal(String),

    /// A binary or text file did not match its expected format.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// Dataset loading failed; `frame` names the offending record when known.
    #[error("dataset error{}: {message}", frame.map(|f| format!(" (frame {f})")).unwrap_or_default())]
    Load { frame: Option<usize>, message: String },

    /// Training diverged.
    #[error("non-finite loss at step {step}; batch dump written to {dump}")]
    NonFinite { step: u64, dump: PathBuf },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }
}
