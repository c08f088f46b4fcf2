use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("tensor of shape {shape:?} cannot hold {len} values")]
    BadLength { shape: Vec<usize>, len: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("tape has been consumed by backward")]
    TapeClosed,

    #[error("variable belongs to a different tape")]
    ForeignVariable,

    #[error("time {t} outside [0, 1]")]
    TimeOutOfRange { t: f64 },

    #[error("time embedding size must be even, got {dim}")]
    OddEmbedding { dim: usize },

    #[error("conditional path has zero variance at t = {t}")]
    DegenerateSigma { t: f64 },

    #[error("dopri5 exceeded {max_steps} steps, last t = {t_reached}")]
    MaxStepsExceeded { max_steps: usize, t_reached: f64 },

    #[error("vector field produced a non-finite value at t = {t}")]
    FieldNotFinite { t: f64 },

    #[error("exact trace needs {dim} vjp passes (limit {limit}); use the Hutchinson estimator")]
    TraceDimension { dim: usize, limit: usize },

    #[error("training diverged: non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("labels contain a single class")]
    DegenerateLabels,

    #[error("series is empty")]
    EmptySeries,

    #[error("label count {labels} does not match series length {series}")]
    LabelLength { series: usize, labels: usize },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
