use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch (expected {expected}, got {got})")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{what} ({dims}) is not divisible by patch size {patch}")]
    NotDivisible {
        what: &'static str,
        dims: String,
        patch: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),

    #[error("level {level} out of range for backbone `{backbone}` (levels 1..={max})")]
    LevelOutOfRange {
        backbone: String,
        level: usize,
        max: usize,
    },

    #[error("mask must be binary, found value {0}")]
    NonBinaryMask(f64),

    #[error("augmentation op `{op}` is not permitted by the {policy} policy")]
    OpNotPermitted { op: String, policy: &'static str },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("missing ground-truth mask for {0}")]
    MissingMask(PathBuf),

    #[error("dataset split `{0}` is empty")]
    EmptySplit(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("non-finite loss at step {step} (batch seed {batch_seed}); diagnostics written to {dump}")]
    NonFiniteLoss {
        step: u64,
        batch_seed: u64,
        dump: PathBuf,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
