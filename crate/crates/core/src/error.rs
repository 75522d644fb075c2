//! Error type shared by every module of the crate.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("malformed json in {}: {message}", .path.display())]
    MalformedJson { path: PathBuf, message: String },

    #[error("parse error in {} at line {line}: {message}", .path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unsupported camera model `{0}`")]
    UnsupportedCameraModel(String),

    #[error("unknown ply properties: {}", .0.join(", "))]
    UnknownProperty(Vec<String>),

    #[error("unsupported image format: {0}")]
    UnsupportedImage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("degenerate mirror plane (|n| = {0:e})")]
    DegeneratePlane(f64),

    #[error("degenerate view direction")]
    DegenerateView,

    #[error("non-finite parameter on gaussian {index}: {what}")]
    NonFinite { index: usize, what: &'static str },

    #[error("non-finite loss at step {step} (stage {stage}): {detail}")]
    NonFiniteLoss {
        step: usize,
        stage: u8,
        detail: String,
    },

    #[error("plane fit failed: {0}")]
    FitFailure(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::DegeneratePlane(_)
                | Error::DegenerateView
                | Error::NonFinite { .. }
                | Error::NonFiniteLoss { .. }
                | Error::FitFailure(_)
        )
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        if self.is_numeric() {
            3
        } else {
            2
        }
    }
}
