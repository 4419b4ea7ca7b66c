//! Error taxonomy shared across the library.
//!
//! Variants map onto process exit codes: configuration problems exit with 2,
//! data and I/O problems with 3, and numeric or shape failures with 4.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration: bad hyperparameters, inconsistent dimensions
    /// requested by the user, unknown config keys, infeasible settings.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data (ragged CSV, mask/view row
    /// mismatch, non-binary mask entries, unparsable numbers).
    #[error("data error: {0}")]
    Data(String),

    /// Filesystem failure while reading or writing an artifact.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Shape mismatch inside the compute graph; names the offending site.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite value surfaced where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl Error {
    /// Process exit code associated with this error class.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            Error::Shape(_) | Error::Numeric(_) => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_taxonomy() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::Data("x".into()).exit_code(), 3);
        assert_eq!(
            Error::io("/tmp/x", std::io::Error::new(std::io::ErrorKind::NotFound, "gone"))
                .exit_code(),
            3
        );
        assert_eq!(Error::Shape("x".into()).exit_code(), 4);
        assert_eq!(Error::Numeric("x".into()).exit_code(), 4);
    }
}
