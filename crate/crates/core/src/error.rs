use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("batch_norm: uninitialized statistics (eval mode requires running mean/var)")]
    UninitializedStats,

    #[error("backward: loss must be scalar (1, 1, 1, 1), got {0}")]
    NonScalarLoss(Shape),

    #[error("cbam: reduction ratio {ratio} exceeds channels {channels}")]
    ReductionExceedsChannels { ratio: usize, channels: usize },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {kind}")]
    WeightFile { path: PathBuf, kind: WeightFileError },

    #[error("{path}: {kind}")]
    Pnm { path: PathBuf, kind: PnmError },

    #[error("split: {0}")]
    Split(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("evaluation requires a non-empty dataset")]
    EmptyDataset,

    #[error("unknown report format `{0}` (expected csv or markdown)")]
    UnknownFormat(String),

    #[error("mac counter: unsupported layer `{0}` in graph")]
    UnsupportedLayer(&'static str),

    #[error("config file {path}, line {line}: {msg}")]
    KeyValue { path: PathBuf, line: usize, msg: String },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WeightFileError {
    #[error("bad magic bytes (expected \"DSGW\")")]
    BadMagic,
    #[error("unsupported version {0} (expected 1)")]
    UnsupportedVersion(u32),
    #[error("unexpected end of file")]
    UnexpectedEof,
    #[error("tensor `{0}` not found in model")]
    UnknownTensor(String),
    #[error("tensor `{0}` missing from file")]
    MissingTensor(String),
    #[error("shape mismatch for tensor `{name}`: model {expected:?}, file {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor `{name}` has unsupported dtype code {code}")]
    UnsupportedDtype { name: String, code: u8 },
    #[error("tensor name is not valid UTF-8")]
    BadName,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PnmError {
    #[error("bad magic (expected {expected})")]
    BadMagic { expected: &'static str },
    #[error("unsupported maxval {0} (expected 255)")]
    UnsupportedMaxval(u32),
    #[error("malformed header")]
    MalformedHeader,
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used for one-line diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::UninitializedStats => "uninitialized-stats",
            Error::NonScalarLoss(_) => "non-scalar-loss",
            Error::ReductionExceedsChannels { .. } => "reduction-ratio",
            Error::NonFiniteGradient(_) => "non-finite-gradient",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::WeightFile { .. } => "weight-file",
            Error::Pnm { .. } => "pnm",
            Error::Split(_) => "split",
            Error::Dataset(_) => "dataset",
            Error::EmptyDataset => "empty-dataset",
            Error::UnknownFormat(_) => "unknown-format",
            Error::UnsupportedLayer(_) => "unsupported-layer",
            Error::KeyValue { .. } => "config-file",
        }
    }
}
