//! Crate-wide error type and result alias.

use std::fmt;

/// Errors surfaced by volume handling, synthesis, training, and the CLI.
#[derive(Debug)]
pub enum Error {
    /// A caller-supplied value violates an operation's precondition.
    InvalidArgument(String),
    /// Array shapes are incompatible with the requested operation.
    InvalidShape(String),
    /// An orientation code triple could not be parsed or is inconsistent.
    InvalidOrientation(String),
    /// A synthesis spec cannot produce a valid phantom.
    SpecInfeasible(String),
    /// Configuration is missing, malformed, or inconsistent with the model.
    Config(String),
    /// A required artifact (corpus, checkpoint, results) is missing on disk.
    MissingArtifact(String),
    /// Training produced a non-finite loss; carries the last lr and batch ids.
    NonFiniteLoss { epoch: usize, lr: f64, batch: Vec<usize> },
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// JSON (de)serialization failure.
    Json(serde_json::Error),
    /// File format violation (raw volume, NIfTI, checkpoint).
    Format(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
            Error::InvalidShape(m) => write!(f, "invalid shape: {m}"),
            Error::InvalidOrientation(m) => write!(f, "invalid orientation: {m}"),
            Error::SpecInfeasible(m) => write!(f, "infeasible spec: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::MissingArtifact(m) => write!(f, "missing artifact: {m}"),
            Error::NonFiniteLoss { epoch, lr, batch } => write!(
                f,
                "non-finite loss at epoch {epoch} (lr={lr:.3e}, batch volumes {batch:?})"
            ),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
            Error::Format(m) => write!(f, "format error: {m}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for user/config errors, 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_)
            | Error::InvalidShape(_)
            | Error::InvalidOrientation(_)
            | Error::SpecInfeasible(_)
            | Error::Config(_)
            | Error::MissingArtifact(_) => 2,
            _ => 3,
        }
    }
}
