use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Every kernel weight in the smoothing window is zero.
    #[error("degenerate smoothing window at x0 = {x0} (bandwidth {bandwidth})")]
    DegenerateWindow { x0: f64, bandwidth: f64 },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Too many replicate or cell failures for the result to be trusted.
    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
