use thiserror::Error;

/// Errors raised by the estimators and the data layer.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input (data file, design spec, arguments).
    #[error("input error: {0}")]
    Input(String),

    /// A data record violates the dataset invariants; `row` is 1-based and
    /// counts the header as row 1.
    #[error("row {row}: {message}")]
    Record { row: usize, message: String },

    /// Dimensions of matrices or vectors do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A matrix that must be inverted (or factorized) is singular.
    #[error("singular matrix: {0}")]
    Singular(String),

    /// A stratum matrix G_l of a Kronecker covariance is singular.
    #[error("stratum {index} covariance is singular")]
    SingularStratum { index: usize },

    /// The fixed-effects design does not have full column rank.
    #[error("rank-deficient design: rank {rank} < {cols} columns")]
    RankDeficient { rank: usize, cols: usize },

    /// The layout does not support the requested estimator.
    #[error("design error: {0}")]
    Design(String),

    /// Some parameter is not estimable from the observed cells.
    #[error("inestimable: {0}")]
    Inestimable(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
