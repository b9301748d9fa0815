use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("rotation undefined below dimension 2 (got {dim})")]
    DimensionTooSmall { dim: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("{what} requires batch statistics: need at least {needed} rows, got {got}")]
    BatchTooSmall {
        what: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("degenerate covariance: trace {trace} is not positive")]
    DegenerateCovariance { trace: f64 },

    #[error("singular system: smallest pivot {pivot:e} below threshold")]
    Singular { pivot: f64 },

    #[error("unknown distribution `{0}`")]
    UnknownDistribution(String),

    #[error("running statistics have not been populated")]
    StatsNotPopulated,

    #[error("stale cache: forward pass was taken at model version {cached}, model is at {current}")]
    StaleCache { cached: u64, current: u64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
