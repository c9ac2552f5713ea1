//! Error types shared across the crate.

use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not positive semidefinite: most negative eigenvalue {most_negative:e} exceeds tolerance {tolerance:e}")]
    NotPsd { most_negative: f64, tolerance: f64 },

    #[error("matrix is not symmetric: max asymmetry {asymmetry:e} relative to scale")]
    NotSymmetric { asymmetry: f64 },

    #[error("invalid regularization: {0}")]
    InvalidRegularization(String),

    #[error("strong-featurization limit has no finite penalty operator; fit it through the dedicated predictor path")]
    StrongFeaturizationPenalty,

    #[error("sample-rich regime (n = {n} >= h = {h}): the fixed point is undefined, use the sample-rich risk instead")]
    SampleRich { n: usize, h: usize },

    #[error("boundary regime (n = {n} = h): the asymptotic risk diverges")]
    Boundary { n: usize },

    #[error("uninformative representation: the prior-weighted representation has zero trace")]
    UninformativeRepresentation,

    #[error("singular design matrix: smallest eigenvalue {smallest:e}")]
    SingularDesign { smallest: f64 },

    #[error("pretraining sample count {n_pre} must exceed the dimension {p}")]
    UnderdeterminedUpstream { n_pre: usize, p: usize },

    #[error("degenerate eigenvalue cluster (min gap {gap:e}) persists after jitter; gradient is not defined")]
    DegenerateEigenvalues { gap: f64 },

    #[error("optimization diverged: {0}")]
    Diverged(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
