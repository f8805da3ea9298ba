use thiserror::Error;

/// Everything that can go wrong inside the model.
///
/// The split matters to callers: [`Error::Config`] means the input was
/// rejected, every other variant means the numerics failed on valid input.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("could not bracket a root: {0}")]
    Bracket(String),

    #[error("integration became non-finite at t = {t:.6} s: {what}")]
    NonFinite { t: f64, what: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("soundness check failed: {0}")]
    Soundness(String),

    #[error("i/o: {0}")]
    Io(String),
}

impl Error {
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
