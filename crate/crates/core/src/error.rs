use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is at or below the zero-norm threshold")]
    ZeroNorm { norm: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid encoder spec: {0}")]
    InvalidSpec(String),
    #[error("stale activation cache: {0}")]
    StaleCache(String),

    #[error("invalid memory bank capacity {capacity} or dimension {dim}")]
    InvalidCapacity { capacity: usize, dim: usize },
    #[error("batch of {batch} rows exceeds bank capacity {capacity}")]
    BatchTooLarge { batch: usize, capacity: usize },
    #[error("bank capacity {capacity} is not a multiple of batch size {batch}")]
    IndivisibleCapacity { batch: usize, capacity: usize },
    #[error("row {row} is not unit-norm (norm {norm})")]
    NotNormalized { row: usize, norm: f64 },
    #[error("invalid hard-negative subset size {requested} for {available} stored rows")]
    InvalidSubsetSize { requested: usize, available: usize },

    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("truncated record stream: {len} bytes is not a multiple of {record} bytes")]
    TruncatedRecord { len: usize, record: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("empty batch")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u8, expected: u8 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("k = {k} exceeds index size {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("embedding index is empty")]
    EmptyIndex,

    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}
