use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("projected homogeneous coordinate vanishes (w = {w:e})")]
    DegeneratePoint { w: f64 },

    #[error("homography is singular (|det| = {det:e})")]
    SingularHomography { det: f64 },

    #[error("invalid rectangle: width and height must be >= 1 (got {w}x{h})")]
    InvalidRect { w: i64, h: i64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("sampler exhausted after {attempts} attempts: {reason}")]
    SamplerExhausted { attempts: usize, reason: String },

    #[error("no keypoint is far enough from the border ({skipped} skipped)")]
    DegenerateKeypoint { skipped: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("target does not depend on the input")]
    NoGradientPath,

    #[error("checkpoint schema version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("invalid contrastive pairing: {0}")]
    InvalidPairing(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {value}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },

    #[error("need at least 4 matches, got {0}")]
    InsufficientMatches(usize),

    #[error("every minimal sample was degenerate")]
    DegenerateConfiguration,

    #[error("no detections in either image")]
    EmptyDetections,

    #[error("malformed sequence {path}: {reason}")]
    MalformedSequence { path: PathBuf, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("precondition failed: {0}")]
    Precondition(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
