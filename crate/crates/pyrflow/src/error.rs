use std::path::PathBuf;
use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed image header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("unsupported image magic {found:?} in {path}: only binary P5/P6 are supported")]
    UnsupportedMagic { path: PathBuf, found: String },

    #[error("unsupported maxval {maxval} in {path}: only 255 is supported")]
    UnsupportedMaxval { path: PathBuf, maxval: u32 },

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("bad flo magic in {path}: expected 202021.25, found {found}")]
    BadFloMagic { path: PathBuf, found: f32 },

    #[error("flo size mismatch in {path}: header says {width}x{height}, payload holds {found} f32 values")]
    FloSizeMismatch {
        path: PathBuf,
        width: i32,
        height: i32,
        found: usize,
    },

    #[error("non-finite flow value at pixel ({x}, {y})")]
    NonFiniteFlow { x: usize, y: usize },

    #[error("bad checkpoint {path}: {reason}")]
    BadCheckpoint { path: PathBuf, reason: String },

    #[error("checkpoint/architecture mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("gradient set mismatch: {0}")]
    GradientMismatch(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid scene spec: {0}")]
    Scene(String),

    #[error(
        "non-finite loss at step {step}: total={total} diff={diff} census={census} smooth={smooth}"
    )]
    NonFiniteLoss {
        step: u64,
        total: f64,
        diff: f64,
        census: f64,
        smooth: f64,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
