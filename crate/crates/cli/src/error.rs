use std::fmt;

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or config (exit 1).
    Usage(String),
    /// Unreadable or malformed input data, IO failures (exit 2).
    Data(anyhow::Error),
    /// Training produced a non-finite loss (exit 3).
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(e) => write!(f, "data error: {e:#}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.into())
    }
}

impl From<sigshot::train::TrainError> for CliError {
    fn from(e: sigshot::train::TrainError) -> Self {
        use sigshot::train::TrainError;
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            TrainError::InvalidConfig(m) => CliError::Usage(m),
            other => CliError::Data(other.into()),
        }
    }
}

impl From<sigshot::model::ModelError> for CliError {
    fn from(e: sigshot::model::ModelError) -> Self {
        CliError::Data(e.into())
    }
}
