use thiserror::Error;

/// Errors produced while building, fitting or reporting a model.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid basis specification: {0}")]
    InvalidSpec(String),

    #[error("zero variance in covariate {covariate}, basis function {basis}")]
    ZeroVariance { covariate: usize, basis: usize },

    #[error("covariate {covariate}: only {distinct} distinct knot(s) after collapsing duplicates, need at least 2")]
    TooFewKnots { covariate: usize, distinct: usize },

    #[error("covariate {covariate}: design block has rank {rank} but {columns} basis functions")]
    RankDeficient {
        covariate: usize,
        rank: usize,
        columns: usize,
    },

    #[error("index {index} out of range (length {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("brute-force kernel supports at most {max} covariates, got {p}")]
    TooManyCovariates { p: usize, max: usize },

    #[error("interaction order must be at least 1")]
    ZeroOrder,

    #[error("subset of size {size} exceeds the model's interaction order {order}")]
    SubsetTooLarge { size: usize, order: usize },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("non-finite value in {context}; parameters: {snapshot}")]
    NonFinite { context: String, snapshot: String },

    #[error("invalid holdout: {0}")]
    InvalidHoldout(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("change of basis needs at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("rank-deficient projection design for pair ({i}, {j})")]
    RankDeficientPair { i: usize, j: usize },

    #[error("change of basis is only defined for interaction order 2, model has order {0}")]
    UnsupportedOrder(usize),

    #[error("empty sample")]
    EmptySample,
}

impl Error {
    /// True for failures of the numerics rather than of the caller's input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular(_) | Error::NonFinite { .. } | Error::RankDeficientPair { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
