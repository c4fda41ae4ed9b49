use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Coefficients do not describe a real ellipse with nonempty interior.
    #[error("conic is not a real ellipse")]
    DegenerateConic,

    #[error("vector has zero norm")]
    ZeroVector,

    #[error("input array is empty")]
    EmptyInput,

    #[error("parameter vector contains non-finite entries")]
    NonFiniteParameters,

    /// A finite-difference probe produced a non-finite function value.
    #[error("non-finite function value at finite-difference probe {index}")]
    NonFiniteProbe { index: usize },

    #[error("initial estimate has a non-positive semi-axis")]
    DegenerateSeed,

    #[error("hessian is singular beyond pseudo-inverse tolerance")]
    SingularHessian,

    #[error("too few edge points: found {found}, need at least 6")]
    TooFewEdgePoints { found: usize },

    #[error("data are degenerate for a conic fit")]
    DegenerateData,

    #[error("fitted conic is not an ellipse")]
    NotAnEllipse,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("missing metadata key: {0}")]
    MissingKey(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
