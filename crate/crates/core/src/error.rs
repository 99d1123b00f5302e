use thiserror::Error;

/// Errors raised by the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lattice grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("spectral table entry {value:e} at frequency {index} violates positive-definiteness (tolerance {tolerance:e})")]
    PsdViolation {
        index: usize,
        value: f64,
        tolerance: f64,
    },

    #[error("covariance decay envelope violated at lag {lag:?}: |c|(1+|x|)^beta = {scaled:.4e} outside [1/C0, C0] with C0 = {c0}")]
    DecayEnvelope { lag: Vec<i64>, scaled: f64, c0: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("support guard violated: {0}")]
    SupportGuard(String),

    #[error("resolution guard violated: {0}")]
    ResolutionGuard(String),

    #[error("ellipticity violated at probe {probe}: {detail}")]
    Ellipticity { probe: usize, detail: String },

    #[error("solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("flux is not mean-zero: max |mean| = {0:e}")]
    FluxNotMeanZero(f64),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("zero sample variance")]
    ZeroVariance,

    #[error("estimate too noisy: {0}")]
    TooNoisy(String),

    #[error("quadrature nodes insufficient: {nodes} nodes per axis for degree {degree}")]
    QuadratureNodes { nodes: usize, degree: usize },

    #[error("too many failed samples: {failed} of {total}")]
    TooManyFailures { failed: usize, total: usize },

    #[error("missing derivative data: {0}")]
    MissingDerivative(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
