use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is missing, malformed or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Data handed to an operation violates its preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    /// A ranking metric was requested on labels containing a single class.
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("non-finite loss at step {step}: l_int={l_int}, l_ori={l_ori}")]
    NonFinite { step: u64, l_int: f64, l_ori: f64 },

    /// An internal invariant was broken. Always a bug.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    /// True for errors caused by the user's configuration or inputs rather
    /// than a failure while running.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::InvalidInput(_) | Error::Version { .. } | Error::UndefinedMetric(_)
        )
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}

macro_rules! invalid_input {
    ($($arg:tt)*) => { $crate::error::Error::InvalidInput(format!($($arg)*)) };
}

pub(crate) use config_err;
pub(crate) use invalid_input;
