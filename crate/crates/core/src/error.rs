use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },

    #[error("index {index} out of range for {len} elements")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// The conditional density normalizer underflowed: the query lies far from
    /// every active Gaussian center.
    #[error("degenerate conditional density (normalizer {normalizer:e})")]
    DegenerateDensity { normalizer: f64 },

    #[error("linear system is singular: {0}")]
    SingularSystem(String),

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("too many degenerate model rollouts: {degenerate} of {attempted}")]
    TooManyDegenerate { degenerate: usize, attempted: usize },

    #[error("schedule {batch}x{repeats} does not exhaust budget {budget}")]
    BudgetMismatch { batch: usize, repeats: usize, budget: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { what, expected, got });
    }
    Ok(())
}
