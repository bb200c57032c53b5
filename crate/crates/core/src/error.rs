use thiserror::Error;

pub type Result<T, E = KvhError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KvhError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid model parameters: {0}")]
    InvalidModel(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("axis {axis} out of range for {axes} phase-space axes")]
    AxisOutOfRange { axis: usize, axes: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("point with |q| = {radius:.6e} lies inside the excluded ball r_min = {r_min:.6e}")]
    SingularRegion { radius: f64, r_min: f64 },

    #[error("trajectory entered the singular region at t = {time:.6e}")]
    SingularAbort { time: f64 },

    #[error("operands live on different grids or carry different hbar")]
    GridMismatch,

    #[error("{op} is not available for n = {n}")]
    UnsupportedDimension { op: &'static str, n: usize },

    #[error("domain too small on axis {axis}: need [{need_lo:.4}, {need_hi:.4}], have [{have_lo:.4}, {have_hi:.4}]")]
    DomainTooSmall {
        axis: usize,
        need_lo: f64,
        need_hi: f64,
        have_lo: f64,
        have_hi: f64,
    },

    #[error("dt = {dt:.6e} exceeds the CFL bound {bound:.6e} (max |X_H| = {max_speed:.6e})")]
    CflViolation { dt: f64, bound: f64, max_speed: f64 },

    #[error("non-finite value produced at step {step}")]
    NonFinite { step: usize },

    #[error("boundary band magnitude ratio {ratio:.3e} exceeds {limit:.1e}; state does not decay")]
    BoundaryNotDecayed { ratio: f64, limit: f64 },

    #[error("rotated or translated support escapes the domain")]
    SupportEscapesDomain,

    #[error("insufficient samples: need at least {need}, have {have}")]
    InsufficientSamples { need: usize, have: usize },

    #[error("{aborted} of {total} samples hit the singular region")]
    TooManyAborts { aborted: usize, total: usize },

    #[error("expectation of {what} has relative imaginary part {ratio:.3e} above {limit:.1e}")]
    ImaginaryExpectation { what: String, ratio: f64, limit: f64 },

    #[error("wrong model kind: {0}")]
    WrongModelKind(String),
}
