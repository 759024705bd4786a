use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// One offending input row found during dataset validation.
#[derive(Debug, Clone, PartialEq)]
pub struct RowIssue {
    pub file: String,
    /// 1-based data row (header excluded).
    pub row: usize,
    pub message: String,
}

impl fmt::Display for RowIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} row {}: {}", self.file, self.row, self.message)
    }
}

fn join_issues(issues: &[RowIssue]) -> String {
    issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate tail probability {prob:e} at cutoff {cutoff}")]
    DegenerateTail { cutoff: f64, prob: f64 },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation failed: {}", join_issues(.0))]
    Validation(Vec<RowIssue>),

    #[error("numeric failure in {context}: {message}")]
    Numeric { context: String, message: String },

    /// A parameter state that violates a hard model constraint.
    #[error("rejected state: {0}")]
    RejectedState(String),

    #[error("degenerate trace: {0}")]
    DegenerateTrace(String),

    #[error("checksum mismatch: {0}")]
    Checksum(String),

    #[error("unsupported file version {found} (expected {expected}); re-export with a matching release")]
    Version { found: u32, expected: u32 },

    #[error("format error: {0}")]
    Format(String),

    #[error("chain {chain} failed at iteration {iteration} (checkpoint: {checkpoint:?}): {source}")]
    Sampler {
        chain: usize,
        iteration: usize,
        checkpoint: Option<PathBuf>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub fn numeric(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad input data or configuration.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::Domain(_)
                | Error::Lookup(_)
                | Error::Config(_)
                | Error::Validation(_)
                | Error::Csv(_)
                | Error::TomlDe(_)
                | Error::Format(_)
        )
    }
}
