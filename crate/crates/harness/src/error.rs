use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),

    #[error("numeric abort: {0}")]
    Numeric(String),

    #[error("{0}")]
    Core(apg_core::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<apg_core::Error> for HarnessError {
    fn from(e: apg_core::Error) -> Self {
        use apg_core::Error as E;
        match e {
            E::NonFiniteGradient(_) | E::Degenerate | E::Numeric(_) => HarnessError::Numeric(e.to_string()),
            E::Checkpoint(_) => HarnessError::Config(e.to_string()),
            other => HarnessError::Core(other),
        }
    }
}

impl HarnessError {
    /// Process exit code: 2 for configuration problems, 3 for numeric aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Numeric(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
