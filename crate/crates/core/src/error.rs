use std::path::PathBuf;

use thiserror::Error;

use crate::taxonomy::CodeSystemId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("unknown code {system}:{code}")]
    UnknownCode { system: CodeSystemId, code: String },

    #[error("invalid taxonomy: {0}")]
    Taxonomy(String),

    #[error("invalid cohort: {0}")]
    Cohort(String),

    #[error("incidence lookup failed: {0}")]
    Incidence(String),

    #[error("invalid feature config: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate outcome: all {n} rows have y = {value}")]
    DegenerateOutcome { n: usize, value: u8 },

    #[error("separation detected: {0}")]
    Separation(String),

    #[error("fit failed at path position {position} (lambda = {lambda:e}): {source}")]
    PathFit {
        position: usize,
        lambda: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("fold {fold}: {source}")]
    FoldFit {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("too few observations: {0}")]
    TooFew(String),

    #[error("convergence failure: {0}")]
    Convergence(String),

    #[error("invalid generator spec: {0}")]
    Generator(String),

    #[error("design cache: {0}")]
    Cache(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(source_name: &str, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            source_name: source_name.to_string(),
            line,
            message: message.into(),
        }
    }

    /// Short machine-readable tag used in the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::UnknownCode { .. } => "unknown_code",
            Error::Taxonomy(_) => "taxonomy",
            Error::Cohort(_) => "cohort",
            Error::Incidence(_) => "incidence",
            Error::Config(_) => "config",
            Error::Dimension(_) => "dimension",
            Error::InvalidInput(_) => "invalid_input",
            Error::DegenerateOutcome { .. } => "degenerate_outcome",
            Error::Separation(_) => "separation",
            Error::PathFit { .. } => "path_fit",
            Error::FoldFit { .. } => "fold_fit",
            Error::TooFew(_) => "too_few",
            Error::Convergence(_) => "convergence",
            Error::Generator(_) => "generator",
            Error::Cache(_) => "cache",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
