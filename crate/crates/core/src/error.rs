use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid output length in {op}: {detail}")]
    Length { op: &'static str, detail: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("layout mismatch: expected {expected} parameters, got {actual}")]
    Layout { expected: usize, actual: usize },

    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },

    #[error("non-finite gradient in parameter {index}")]
    Divergence { index: usize },

    #[error("condition source mismatch: generator trained on {expected}, got {actual}")]
    ConditionSource { expected: String, actual: String },

    #[error("missing artifact {path}; run `{stage}` first")]
    Dependency { stage: String, path: PathBuf },

    #[error("unsupported container version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("malformed container: {0}")]
    Container(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Length { .. } => "length",
            Error::Input(_) => "input",
            Error::Config { .. } => "config",
            Error::Parse { .. } => "parse",
            Error::Layout { .. } => "layout",
            Error::Training { .. } => "training",
            Error::Divergence { .. } => "divergence",
            Error::ConditionSource { .. } => "condition-source",
            Error::Dependency { .. } => "dependency",
            Error::Version { .. } => "version",
            Error::Container(_) => "container",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
