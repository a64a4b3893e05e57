use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("level {level} exceeds the hard cap {cap}")]
    LevelOverflow { level: u32, cap: u32 },
    #[error("cost overflow: {0}")]
    BudgetOverflow(String),
    #[error("estimator {estimator} is inapplicable: {reason}")]
    Inapplicable { estimator: String, reason: String },
    #[error("iterate diverged at iteration {iteration}")]
    Divergence { iteration: usize, last_finite: Vec<f64> },
    #[error("unstable queue: {0}")]
    Unstable(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("degenerate denominator: {0}")]
    DegenerateDenominator(String),
    #[error("root bracket not found: {0}")]
    Bracket(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("coupling contract violated: {0}")]
    Contract(String),
}
