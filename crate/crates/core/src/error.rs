use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("index out of range: {0}")]
    Range(String),

    #[error("inconsistent structure: {0}")]
    Structure(String),

    #[error("malformed model: {0}")]
    Model(String),

    #[error("solver environment: {0}")]
    Environment(String),

    #[error("solver failed ({context}): {status}")]
    Solver { context: String, status: String },

    #[error("unsupported structure: {0}")]
    Unsupported(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Prefixes solver failures with the scenario/stage they occurred in.
    pub fn with_context(self, ctx: impl AsRef<str>) -> Self {
        match self {
            Error::Solver { context, status } => Error::Solver {
                context: format!("{}; {}", ctx.as_ref(), context),
                status,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
