use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type. Variants grade into the CLI exit codes:
/// data/format problems exit with 2, numerical failures with 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{what}: dimension mismatch, expected {expected_w}x{expected_h}, got {got_w}x{got_h}")]
    DimensionMismatch {
        what: &'static str,
        expected_w: usize,
        expected_h: usize,
        got_w: usize,
        got_h: usize,
    },

    #[error("image buffers must have 1 or 3 channels, got {0}")]
    BadChannelCount(usize),

    #[error("buffer length {got} does not match {width}x{height}x{channels}")]
    BadBufferLength {
        width: usize,
        height: usize,
        channels: usize,
        got: usize,
    },

    #[error("{what} requires dimensions divisible by 8 so the pyramid can halve three times, got {width}x{height}")]
    NotDivisibleBy8 {
        what: &'static str,
        width: usize,
        height: usize,
    },

    #[error("{what}: {reason}")]
    InvalidInput { what: &'static str, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("not enough data: {what} needs {needed}, only {available} available")]
    InsufficientData {
        what: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("no jointly valid pixels between prediction and ground truth")]
    NoValidOverlap,

    #[error("ground truth contains {count} zero-valued pixels marked valid; mask them upstream")]
    ZeroGroundTruth { count: usize },

    #[error("point cloud with {points} usable points is degenerate, need at least {needed}")]
    DegenerateCloud { points: usize, needed: usize },

    #[error("synthetic motion leaves only {in_bounds_fraction:.3} of pixels in bounds, need at least {required:.3}")]
    ExcessiveMotion {
        in_bounds_fraction: f64,
        required: f64,
    },

    #[error("optimization diverged at step {step}: loss {current:.6e} exceeds 10x initial {initial:.6e}")]
    Diverged {
        step: usize,
        initial: f64,
        current: f64,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures of the numerical machinery rather than of the input data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Diverged { .. } | Error::DegenerateCloud { .. } | Error::NoValidOverlap
        )
    }
}
