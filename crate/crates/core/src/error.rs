use thiserror::Error;

/// Errors raised anywhere in the testing pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A numeric argument fell outside the domain of a function.
    #[error("domain error: {0}")]
    Domain(String),

    /// Input data violated a model or schema requirement.
    #[error("data error{}: {message}", location(*row, column.as_deref()))]
    Data {
        row: Option<usize>,
        column: Option<String>,
        message: String,
    },

    /// A model parameter was out of range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Dimensions of two inputs did not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// The null-model fit did not converge. Carries the last iterate.
    #[error("convergence error after {iterations} iterations (score norm {score_norm:.3e}): {message}")]
    Convergence {
        iterations: usize,
        score_norm: f64,
        last_beta: Vec<f64>,
        message: String,
    },

    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

fn location(row: Option<usize>, column: Option<&str>) -> String {
    match (row, column) {
        (Some(r), Some(c)) => format!(" at row {r}, column '{c}'"),
        (Some(r), None) => format!(" at row {r}"),
        (None, Some(c)) => format!(" in column '{c}'"),
        (None, None) => String::new(),
    }
}

impl Error {
    pub fn data(message: impl Into<String>) -> Self {
        Error::Data {
            row: None,
            column: None,
            message: message.into(),
        }
    }

    pub fn data_at(row: usize, column: Option<&str>, message: impl Into<String>) -> Self {
        Error::Data {
            row: Some(row),
            column: column.map(str::to_owned),
            message: message.into(),
        }
    }

    /// Process exit code for this error class: 2 data, 3 convergence, 4 config.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Data { .. } | Error::Domain(_) | Error::Dimension(_) | Error::Io(_) => 2,
            Error::Convergence { .. } => 3,
            Error::Parameter(_) | Error::Config(_) => 4,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
