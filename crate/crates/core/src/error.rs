use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of range: {what} = {index}, valid range 0..{len}")]
    OutOfBounds {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("non-positive density value {value} at index {index}")]
    NonPositiveDensity { index: usize, value: f64 },

    #[error("unsupported derivative order ({i}, {j}); orders up to 3 per slot are available")]
    UnsupportedOrder { i: usize, j: usize },

    #[error("invalid kernel configuration: {0}")]
    InvalidKernel(String),

    #[error("kernel mismatch between RKHS elements")]
    KernelMismatch,

    #[error("right-hand side is not zero-mean (quadrature mean {mean:e})")]
    NotZeroMean { mean: f64 },

    #[error("singular weighted Laplacian: density touches the floor ({min:e})")]
    SingularLaplacian { min: f64 },

    #[error("operation requires periodic boundary mode")]
    RequiresPeriodic,

    #[error("explicit step unstable: {count} of {total} nodes undershot the floor, reduce dt_solver (currently {dt:e})")]
    CflViolation { count: usize, total: usize, dt: f64 },

    #[error("particle crossing detected at t = {time}")]
    ParticleCrossing { time: f64 },

    #[error("invalid energy specification: {0}")]
    InvalidEnergy(String),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("factorization failed after jitter escalation (condition estimate {condition:e})")]
    Factorization { condition: f64 },

    #[error("invalid sweep plan: {0}")]
    InvalidPlan(String),

    #[error("sweep aborted at N = {n}: {source}")]
    SweepAborted {
        n: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("missing sidecar metadata: {0}")]
    MetaMissing(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short machine-readable identifier, used by the CLI error JSON.
    pub fn code(&self) -> &'static str {
        match self {
            Error::OutOfBounds { .. } => "out_of_bounds",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::InvalidMesh(_) => "invalid_mesh",
            Error::NonPositiveDensity { .. } => "non_positive_density",
            Error::UnsupportedOrder { .. } => "unsupported_order",
            Error::InvalidKernel(_) => "invalid_kernel",
            Error::KernelMismatch => "kernel_mismatch",
            Error::NotZeroMean { .. } => "not_zero_mean",
            Error::SingularLaplacian { .. } => "singular_laplacian",
            Error::RequiresPeriodic => "requires_periodic",
            Error::CflViolation { .. } => "cfl_violation",
            Error::ParticleCrossing { .. } => "particle_crossing",
            Error::InvalidEnergy(_) => "invalid_energy",
            Error::InvalidProblem(_) => "invalid_problem",
            Error::Factorization { .. } => "factorization_failed",
            Error::InvalidPlan(_) => "invalid_plan",
            Error::SweepAborted { .. } => "sweep_aborted",
            Error::Format(_) => "format_error",
            Error::MetaMissing(_) => "meta_missing",
            Error::Io(_) => "io_error",
            Error::Json(_) => "json_error",
        }
    }
}
