use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("transition matrix is not stochastic: {0}")]
    NonStochastic(String),
    #[error("chain is reducible: no unique stationary vector")]
    Reducible,
    #[error("state space too large for subset enumeration ({0} > 20 states)")]
    StateSpaceTooLarge(usize),
    #[error("mixing profile is identically zero")]
    AllZero,
    #[error("not enough data: {0}")]
    InsufficientData(String),
    #[error("branch {branch} is not cell-aligned: {detail}")]
    NotMarkov { branch: usize, detail: String },
    #[error("branch {branch} image leaves [0,1]: {detail}")]
    OutOfRange { branch: usize, detail: String },
    #[error("invalid resolution {resolution}: N must be a multiple of M = {required}")]
    ResolutionMismatch { resolution: usize, required: usize },
    #[error("unknown symbol {0}")]
    UnknownSymbol(usize),
    #[error("density drops below {threshold:e} (min value {min:e})")]
    DegenerateDensity { min: f64, threshold: f64 },
    #[error("no convergence after {0} iterations")]
    NoConvergence(usize),
    #[error("horizon {horizon} exceeds limit {limit}")]
    HorizonTooLarge { horizon: usize, limit: usize },
    #[error("order {order} exceeds limit {limit}")]
    OrderTooLarge { order: usize, limit: usize },
    #[error("blocks overlap or are out of order")]
    OverlappingBlocks,
    #[error("K-iterates are not summable: {0}")]
    NotSummable(String),
    #[error("asymptotic variance is zero")]
    ZeroVariance,
    #[error("too few hits: expected at least {required}, got {expected:.1}")]
    TooFewHits { expected: f64, required: f64 },
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
}

pub type Result<T> = std::result::Result<T, LabError>;
