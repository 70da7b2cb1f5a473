use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("matrix is not hermitian (defect {defect:.3e}, allowed {allowed:.3e})")]
    NotHermitian { defect: f64, allowed: f64 },

    #[error("matrix is not unitary (defect {defect:.3e}, allowed {allowed:.3e})")]
    NotUnitary { defect: f64, allowed: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("quadrature did not converge on [{a}, {b}] (achieved error estimate {achieved:.3e})")]
    QuadratureNonConvergence { a: f64, b: f64, achieved: f64 },

    #[error("oracle exceeded {steps} steps at t = {t_reached} (last error estimate {achieved:.3e})")]
    OracleMaxSteps {
        steps: usize,
        t_reached: f64,
        achieved: f64,
    },

    #[error("time {t} lies outside the horizon [0, {horizon}]")]
    HorizonExceeded { t: f64, horizon: f64 },

    #[error("requested depth {requested} exceeds the cap of {max}")]
    DepthExceeded { requested: usize, max: usize },

    #[error("slope fit needs at least 3 positive points, got {0}")]
    InsufficientPoints(usize),

    #[error("samples are not on a uniform grid of spacing {h}")]
    NonUniformGrid { h: f64 },

    #[error("decay bound violated by term {index}: norm {norm:.3e} > {bound:.3e}")]
    DecayViolation { index: usize, norm: f64, bound: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
