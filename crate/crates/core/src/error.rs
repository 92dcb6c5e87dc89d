use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("loss domain error: {0}")]
    Domain(String),

    #[error("simulation diverged at step {step}")]
    Divergence { step: usize },

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },

    #[error("loss curvature is not positive (d2 = {value}) at step {step}")]
    Convexity { step: usize, value: f64 },

    #[error("least-squares system is rank deficient: {0}")]
    Rank(String),

    #[error("recursive least-squares update ill-conditioned at regressor {index}")]
    Conditioning { index: usize },

    #[error("initial-state estimation failed: {0}")]
    Estimation(String),

    #[error("ADMM iteration {iteration} failed: {source}")]
    Admm {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(what: &'static str, expected: usize, got: usize) -> Self {
        Error::Shape {
            what,
            expected,
            got,
        }
    }

    /// True for failures of the numerical procedure itself (as opposed to bad
    /// input or configuration).
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Domain(_)
            | Error::Divergence { .. }
            | Error::NonFinite { .. }
            | Error::Convexity { .. }
            | Error::Rank(_)
            | Error::Conditioning { .. }
            | Error::Estimation(_) => true,
            Error::Admm { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
