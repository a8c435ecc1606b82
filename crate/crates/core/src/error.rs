use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported dimension {0}: only d = 1 and d = 2 are supported")]
    UnsupportedDimension(usize),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("matrix is not Hermitian (relative deviation {deviation:e})")]
    NotHermitian { deviation: f64 },

    #[error("backend {backend} cannot handle this problem: {reason}")]
    UnsupportedBackend { backend: &'static str, reason: String },

    #[error("time step {dt:e} exceeds the explicit stability limit {limit:e}")]
    StabilityLimit { dt: f64, limit: f64 },

    #[error("expectation value is undefined for a zero field")]
    ZeroField,

    #[error("oracle scale exceeded: {0}")]
    OracleScale(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
