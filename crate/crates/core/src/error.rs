use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the analysis toolkit.
///
/// The variants are split along the line the CLI cares about: `Argument`
/// is a caller mistake, everything else is a problem with the data.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("data error in layer `{layer}`: {message}")]
    Data { layer: String, message: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// The stored power-iteration vector lies in the null space of the
    /// current batch covariance; the caller should re-randomize it.
    #[error("power iteration collapsed to zero; restart with a fresh vector")]
    PowerIterationRestart,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for caller-side mistakes (bad flags, out-of-range parameters).
    pub fn is_argument(&self) -> bool {
        matches!(self, Error::Argument(_))
    }
}
