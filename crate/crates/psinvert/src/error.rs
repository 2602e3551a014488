//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate vector: norm {norm:e} below threshold")]
    DegenerateVector { norm: f64 },
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("bad roughness ladder: k={k}, r_top={r_top}, r_bottom={r_bottom}")]
    BadLadder { k: usize, r_top: f64, r_bottom: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("singular GBR matrix: lambda = 0")]
    SingularG,
    #[error("light matrix is rank deficient (rank < 3)")]
    RankDeficientLights,
    #[error("coordinate out of range: {0}")]
    OutOfRange(f64),
    #[error("dataset has no ground-truth {0}")]
    MissingGroundTruth(&'static str),
    #[error("file format error in {path}: {reason}")]
    FileFormat { path: String, reason: String },
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("count mismatch in {what}: expected {expected}, got {got}")]
    CountMismatch {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("bad scene spec: {0}")]
    BadSpec(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("too few images: got {got}, need at least {need}")]
    TooFewImages { got: usize, need: usize },
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("degenerate intensity estimate (all zero)")]
    DegenerateEstimate,
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
