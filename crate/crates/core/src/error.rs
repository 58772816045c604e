//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("length mismatch: {left} labels vs {right} predictions")]
    LengthMismatch { left: usize, right: usize },

    #[error("class index {index} out of range for {k} classes")]
    IndexOutOfRange { index: usize, k: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("recall undefined for class {class}: no samples with that label")]
    UndefinedRecall { class: usize },

    #[error("precision undefined for class {class}: class never predicted")]
    UndefinedPrecision { class: usize },

    #[error("group {group} is empty")]
    EmptyGroup { group: usize },

    #[error("invalid group partition: {0}")]
    InvalidPartition(String),

    #[error("class prior for class {class} must be positive, got {value}")]
    ZeroPrior { class: usize, value: f64 },

    #[error("gain matrix diagonal entry {index} must be positive, got {value}")]
    NonPositiveDiagonal { index: usize, value: f64 },

    #[error("gain matrix entry ({i},{j}) is negative: {value}")]
    NegativeGainEntry { i: usize, j: usize, value: f64 },

    #[error("weight entry ({i},{j}) is negative: {value}")]
    NegativeWeight { i: usize, j: usize, value: f64 },

    #[error("multiplier vector is not on the probability simplex (sum = {sum})")]
    OffSimplex { sum: f64 },

    #[error("negative multiplier at index {index}: {value}")]
    NegativeMultiplier { index: usize, value: f64 },

    #[error("multiplier update used with wrong rule: expected {expected}")]
    WrongMultiplierRule { expected: String },

    #[error("probability vector invalid: {0}")]
    InvalidProbability(String),

    #[error("logit vector contains a non-finite value at index {index}")]
    NonFiniteLogit { index: usize },

    #[error("normalizer of the gain-adjusted target is not positive: {value}")]
    DegenerateNormalizer { value: f64 },

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty evaluation set")]
    EmptyEvalSet,

    #[error("empty sample pool")]
    EmptyPool,

    #[error("insufficient pool: need {needed} samples, have {available}")]
    InsufficientPool { needed: usize, available: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("class {class} missing from validation split")]
    MissingValidationClass { class: usize },

    #[error("invalid imbalance factor {rho}: must be >= 1")]
    InvalidImbalance { rho: f64 },

    #[error("argument out of domain: {0}")]
    OutOfDomain(String),

    #[error("expansion value gamma = {gamma} must exceed 1")]
    GammaTooSmall { gamma: f64 },

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: String, reason: String },

    #[error("format version mismatch in {path}: expected magic {expected}")]
    VersionMismatch { path: String, expected: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
