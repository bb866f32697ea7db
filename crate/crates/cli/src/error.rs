use std::path::PathBuf;

use thiserror::Error;

/// Scenario text problems, located by line (0 when a required key is absent).
#[derive(Debug, Clone, PartialEq, Error)]
#[error("line {line}: {key}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub key: String,
    pub message: String,
}

impl ParseError {
    pub fn new(line: usize, key: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            line,
            key: key.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] vpcharge::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for a failure before or during a run.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(vpcharge::Error::Precondition(_) | vpcharge::Error::SamplingExhausted { .. }) => {
                crate::EXIT_PRECONDITION
            }
            CliError::Core(vpcharge::Error::Collapse { .. }) => crate::EXIT_COLLAPSE,
            _ => crate::EXIT_FAILURE,
        }
    }
}
