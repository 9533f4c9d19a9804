use std::fmt;
use std::path::PathBuf;

use htmm_core::estimator::EstimatorError;
use htmm_core::moments::MomentsError;
use htmm_core::simulator::SimError;

#[derive(Debug)]
pub enum Error {
    Io { path: PathBuf, source: std::io::Error },
    /// JSON that failed to parse; `field` is the path to the offending value.
    Json { path: PathBuf, field: String, message: String },
    Csv { path: PathBuf, message: String },
    Invalid(String),
    Simulation(SimError),
    Moments(MomentsError),
    Estimator(EstimatorError),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Error::Json { path, field, message } if field.is_empty() || field == "." => {
                write!(f, "{}: {message}", path.display())
            }
            Error::Json { path, field, message } => write!(f, "{}: at `{field}`: {message}", path.display()),
            Error::Csv { path, message } => write!(f, "{}: {message}", path.display()),
            Error::Invalid(msg) => f.write_str(msg),
            Error::Simulation(e) => write!(f, "{e}"),
            Error::Moments(e) => write!(f, "{e}"),
            Error::Estimator(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<SimError> for Error {
    fn from(e: SimError) -> Self {
        Error::Simulation(e)
    }
}

impl From<MomentsError> for Error {
    fn from(e: MomentsError) -> Self {
        Error::Moments(e)
    }
}

impl From<EstimatorError> for Error {
    fn from(e: EstimatorError) -> Self {
        Error::Estimator(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
