use thiserror::Error;

/// Errors raised by the numerical core.
///
/// Every variant carries a message that names the operation that failed so
/// batch reports can be traced back without a backtrace.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("unknown site: {0}")]
    UnknownSite(String),
    #[error("empty support: {0}")]
    EmptySupport(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("convexity risk: {0}")]
    ConvexityRisk(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("unsupported derivative order: {0}")]
    UnsupportedOrder(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("resource limit exceeded: {0}")]
    Resource(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("operator is not positive definite: {0}")]
    Definiteness(String),
    #[error("solver did not converge: {0}")]
    NonConvergence(String),
    #[error("empty mask: {0}")]
    MaskEmpty(String),
    #[error("degenerate measure: {0}")]
    Measure(String),
    #[error("arity error: {0}")]
    Arity(String),
    #[error("support error: {0}")]
    Support(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("stencil leaves the convexity window: {0}")]
    Window(String),
    #[error("assumption not met: {0}")]
    AssumptionNotMet(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
