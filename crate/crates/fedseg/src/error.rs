//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by `{0}`")]
    NonFinite(&'static str),
    #[error("backward requires a scalar loss, got {0} elements")]
    NonScalarLoss(usize),
    #[error("tape already consumed by a backward pass")]
    TapeReuse,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("adapter rank {rank} exceeds min(in, out) = {max}")]
    RankTooLarge { rank: usize, max: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("public dataset is empty")]
    EmptyPublicSet,
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("class count mismatch: {0} vs {1}")]
    ClassCountMismatch(usize, usize),
    #[error("invalid probability map: {0}")]
    InvalidProbability(String),
    #[error("architecture fingerprint mismatch: expected {expected:#018x}, got {got:#018x}")]
    FingerprintMismatch { expected: u64, got: u64 },
    #[error("aggregation weights must be positive")]
    ZeroWeight,
    #[error("soft labels missing for the public dataset")]
    MissingSoftLabels,
    #[error("federation state not initialized")]
    NotInitialized,
    #[error("insufficient data: need {needed}, have {available}")]
    InsufficientData { needed: usize, available: usize },
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("missing pair for `{0}`")]
    MissingPair(String),
    #[error("malformed pgm: {0}")]
    MalformedPgm(String),
    #[error("bad magic in checkpoint (expected \"FSEG\")")]
    BadMagic,
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for config/usage problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_)
            | Error::InvalidSize(_)
            | Error::FingerprintMismatch { .. }
            | Error::BadMagic
            | Error::RankTooLarge { .. }
            | Error::UnknownLayer(_)
            | Error::LabelOutOfRange { .. } => 2,
            _ => 1,
        }
    }
}
