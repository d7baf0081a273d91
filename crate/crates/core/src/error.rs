use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },

    #[error("{context}: channel mismatch, expected {expected}, got {got}")]
    ChannelMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("value outside the domain of {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("validity mask selects no pixels")]
    EmptyMask,

    #[error("non-positive depth {value} at pixel {index}")]
    NonPositiveDepth { index: usize, value: f64 },

    #[error("scale alignment denominator is zero")]
    ZeroDenominator,

    #[error("bad magic {0:?}, expected \"HQT1\"")]
    BadMagic([u8; 4]),

    #[error("truncated tensor record: need {needed} bytes, have {available}")]
    TruncatedFile { needed: usize, available: usize },

    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),

    #[error("malformed tensor header: {0}")]
    MalformedHeader(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("parameter `{0}` not found")]
    UnknownParam(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl Into<String>, got: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.into(),
            got: got.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
