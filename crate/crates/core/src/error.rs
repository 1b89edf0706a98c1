use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported model: delay {delay}, degree {degree} (only delay 2 with degree 2 or 3)")]
    UnsupportedModel { delay: usize, degree: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numeric overflow: {0}")]
    Overflow(String),

    #[error("orbit escaped at index {index} (value {value})")]
    Escape { index: usize, value: f64 },

    #[error("map is not invertible: {0}")]
    NotInvertible(String),

    #[error("singular jacobian at orbit index {index}")]
    SingularJacobian { index: usize },

    #[error("singular model: {0}")]
    SingularModel(String),

    #[error("window length {len} is below the minimum {min}")]
    WindowLength { len: usize, min: usize },

    #[error("degenerate cloud: {0}")]
    DegenerateCloud(String),

    #[error("{failed} of {total} chains failed (first error: {first})")]
    TooManyFailures {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::UnsupportedModel { .. } => "unsupported_model",
            Error::Parameter(_) => "parameter",
            Error::Overflow(_) => "overflow",
            Error::Escape { .. } => "escape",
            Error::NotInvertible(_) => "not_invertible",
            Error::SingularJacobian { .. } => "singular_jacobian",
            Error::SingularModel(_) => "singular_model",
            Error::WindowLength { .. } => "window_length",
            Error::DegenerateCloud(_) => "degenerate_cloud",
            Error::TooManyFailures { .. } => "too_many_failures",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }

    /// True for errors caused by bad user input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::UnsupportedModel { .. }
                | Error::Parameter(_)
                | Error::NotInvertible(_)
                | Error::WindowLength { .. }
                | Error::Config(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}
