use thiserror::Error;

/// Error type shared by every solver and estimator in the crate.
#[derive(Debug, Error)]
pub enum CuspError {
    #[error("solver failed to converge: {0}")]
    NonConvergence(String),
    #[error("invalid ensemble spec: {0}")]
    InvalidSpec(String),
    #[error("evaluation point {0} lies inside the support; enable principal-value mode")]
    SingularEvaluation(f64),
    #[error("window contains more than one density feature")]
    AmbiguousWindow,
    #[error("bracket does not straddle the feature transition: {0}")]
    BracketInvalid(String),
    #[error("fit rejected: {0}")]
    BadFit(String),
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("profiles carry different feature kinds")]
    KindMismatch,
    #[error("interpolating map is not invertible on the requested window")]
    NonInvertible,
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("particle ordering violated after {0} step halvings")]
    CollisionUnresolved(u32),
    #[error("ghost padding overlaps the real spectrum")]
    IndexMismatch,
    #[error("short-range exponent configuration invalid: {0}")]
    RangeError(String),
    #[error("heat propagation step control failed: {0}")]
    StiffnessFailure(String),
    #[error("contour parameters outside the validated hull: {0}")]
    HullViolation(String),
    #[error("eigensolver failed: {0}")]
    EigenFailure(String),
    #[error("no rescaled samples fall in the window")]
    EmptyWindow,
    #[error("zero vector supplied")]
    ZeroVector,
}

pub type Result<T> = std::result::Result<T, CuspError>;
