use thiserror::Error;

/// Errors raised by the numerical routines and the file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not Hermitian (max skew {skew:e})")]
    NotHermitian { skew: f64 },

    #[error("matrix is not positive definite (smallest eigenvalue {min_eig:e})")]
    NotPositiveDefinite { min_eig: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("basis mismatch: `{left}` vs `{right}`")]
    BasisMismatch { left: String, right: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("symmetric power degree {0} is outside the supported range 1..=6")]
    DegreeOutOfRange(usize),

    #[error("quadrature under-resolved: ratio spread {spread:e} exceeds {limit:e}")]
    QuadratureUnderResolved { spread: f64, limit: f64 },

    #[error("perturbation too large: distance {epsilon} is not below 1/2")]
    PerturbationTooLarge { epsilon: f64 },

    #[error("mesh too small: degree contract needs mesh size >= {required}, got {got}")]
    MeshTooSmall { required: usize, got: usize },

    #[error("theta series did not reach 1e-15 within {budget} terms")]
    ThetaTruncation { budget: usize },

    #[error("metric is singular at mesh point {point}")]
    SingularMetric { point: usize },

    #[error("sections have a base point at mesh point {point}")]
    BasePoint { point: usize },

    #[error("Gram matrix is rank deficient (smallest eigenvalue {min_eig:e})")]
    RankDeficient { min_eig: f64 },

    #[error("iteration did not converge after {iterations} steps (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("identity requires Hermitian-Einstein input")]
    NotHermitianEinstein,

    #[error("induced volume form is not positive at node {node}")]
    CurvatureFailure { node: usize },

    #[error("size cap exceeded: {what} = {value} > {cap}")]
    SizeCap {
        what: &'static str,
        value: usize,
        cap: usize,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
