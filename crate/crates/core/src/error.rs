use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("infeasible CTC alignment: {frames} frames cannot emit {required} labels (target length {target_len})")]
    InfeasibleAlignment {
        frames: usize,
        required: usize,
        target_len: usize,
    },

    #[error("target of length {len} does not fit in {capacity} prediction slots")]
    TargetTooLong { len: usize, capacity: usize },

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("image too small: {height}x{width} (minimum {min_height}x{min_width})")]
    ImageTooSmall {
        height: usize,
        width: usize,
        min_height: usize,
        min_width: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("rendering error: no glyph for {0:?}")]
    Render(char),

    #[error("{0}")]
    Range(String),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("context overflow: cache holds {len} positions, capacity {capacity}")]
    Capacity { len: usize, capacity: usize },

    #[error("checkpoint version {found} is not supported (expected {expected}); upgrade required")]
    UpgradeRequired { found: u16, expected: u16 },

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("checkpoint does not match configuration: {0}")]
    CheckpointMismatch(String),

    #[error("non-finite loss at step {step} (lr {lr:e}, batch {batch:?})")]
    NanLoss {
        step: u64,
        lr: f64,
        batch: Vec<usize>,
    },

    #[error("benchmark refused: {0}")]
    BenchRefused(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
