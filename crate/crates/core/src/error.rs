use thiserror::Error;

/// Errors produced by the numerical library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("kernel slice not square-integrable: {0}")]
    Admissibility(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("unsupported domain: {0}")]
    UnsupportedDomain(String),

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("singular volatility matrix at t = {t}")]
    SingularVolatility { t: f64 },

    #[error("unsupported model form: {0}")]
    UnsupportedForm(String),

    #[error("argument outside the domain: {0}")]
    Domain(String),

    #[error("parameters outside the admissible range: {0}")]
    OutOfRange(String),

    #[error("degenerate limit: {0}")]
    DegenerateLimit(String),

    #[error("insufficient sampling: {0}")]
    InsufficientSampling(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidKernel(_) => "invalid_kernel",
            Error::Admissibility(_) => "admissibility",
            Error::Dimension(_) => "dimension",
            Error::UnsupportedDomain(_) => "unsupported_domain",
            Error::Divergence(_) => "divergence",
            Error::NonConvergence { .. } => "non_convergence",
            Error::SingularVolatility { .. } => "singular_volatility",
            Error::UnsupportedForm(_) => "unsupported_form",
            Error::Domain(_) => "domain",
            Error::OutOfRange(_) => "out_of_range",
            Error::DegenerateLimit(_) => "degenerate_limit",
            Error::InsufficientSampling(_) => "insufficient_sampling",
            Error::InvalidModel(_) => "invalid_model",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
