use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("resolution error: {0}")]
    Resolution(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("no convergence after {iterations} iterations (worst residual {worst_residual:.3e})")]
    Convergence {
        iterations: usize,
        worst_residual: f64,
        residuals: Vec<f64>,
    },
    #[error("near-defective pair {index}: |<u,v>| = {overlap:.3e}")]
    NearDefective { index: usize, overlap: f64 },
    #[error("quadrature quality: {0}")]
    Quadrature(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("algebra error: {0}")]
    Algebra(String),
    #[error("position error: {0}")]
    Position(String),
    #[error("physicality error: {0}")]
    Physicality(String),
    #[error("step-size error: {0}")]
    StepSize(String),
    #[error("invalid value for `{key}`: {reason}")]
    Validation { key: String, reason: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("linear algebra failure: {0}")]
    Linalg(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<ndarray_linalg::error::LinalgError> for Error {
    fn from(e: ndarray_linalg::error::LinalgError) -> Self {
        Error::Linalg(e.to_string())
    }
}
