use std::path::PathBuf;

use thiserror::Error;

use crate::train::Checkpoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("degenerate vector")]
    DegenerateVector,

    #[error("dim must be multiple of 4 (got {0})")]
    PositionalDim(usize),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("no visible regions")]
    NoVisibleRegions,

    #[error("no visible tokens")]
    NoVisibleTokens,

    #[error("empty alignment set")]
    EmptyAlignmentSet,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid study `{id}`: {reason}")]
    InvalidStudy { id: String, reason: String },

    #[error("bad magic")]
    BadMagic,

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated file")]
    Truncated,

    #[error("malformed payload: {0}")]
    Malformed(String),

    #[error("checksum mismatch: manifest {expected}, file {found}")]
    ChecksumMismatch { expected: String, found: String },

    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("grid too small: {0}")]
    GridTooSmall(String),

    #[error("K={k} out of range for {n} candidates")]
    KOutOfRange { k: usize, n: usize },

    #[error("missing labels")]
    MissingLabels,

    #[error("empty phrase")]
    EmptyPhrase,

    #[error("empty exterior")]
    EmptyExterior,

    #[error("non-finite gradient in block {block}")]
    NonFiniteGradient { block: String },

    #[error("{fraction:.4} of local alignments degenerate in a batch (limit {limit})")]
    TooManyDegenerate { fraction: f64, limit: f64 },

    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        last_good: Option<Box<Checkpoint>>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
