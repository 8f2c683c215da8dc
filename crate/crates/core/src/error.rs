use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("build error: {0}")]
    Build(String),

    #[error("checkpoint load error: {0}")]
    Load(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("sampler error: {0}")]
    Sampler(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("missing pruning level L{0}")]
    MissingLevel(usize),

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("config drift, refusing to resume; differing fields: {}", .0.join(", "))]
    ConfigDrift(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("run aborted at level L{level}: {source}")]
    Run {
        level: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::ConfigDrift(_) | Error::Build(_) => ErrorKind::Config,
            Error::Ingestion(_)
            | Error::Format(_)
            | Error::Sampler(_)
            | Error::Io { .. }
            | Error::Load(_)
            | Error::Json(_)
            | Error::MissingLevel(_) => ErrorKind::Data,
            Error::Invariant(_)
            | Error::Dimension(_)
            | Error::Index(_)
            | Error::Contract(_)
            | Error::Parameter(_)
            | Error::UndefinedMetric(_) => ErrorKind::Numeric,
            Error::Run { source, .. } => source.kind(),
        }
    }
}
