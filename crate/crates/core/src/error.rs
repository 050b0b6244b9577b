use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid depth {0}: must be finite and positive")]
    InvalidDepth(f64),

    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("degenerate incidence field: {0}")]
    DegenerateField(String),

    #[error("invalid distance constraint: {0}")]
    InvalidConstraint(String),

    #[error("degenerate constraint set: {0}")]
    DegenerateConstraints(String),

    #[error("no jointly valid pixels")]
    EmptyOverlap,

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("degenerate scene: {0}")]
    DegenerateScene(String),

    #[error("constraint sampling failed: {0}")]
    SamplingFailure(String),

    #[error("invalid initialization: {0}")]
    InvalidInitialization(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
