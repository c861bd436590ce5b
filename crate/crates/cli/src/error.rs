use thiserror::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Failures sorted by who has to fix them.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl From<sparsegpc::Error> for CliError {
    fn from(e: sparsegpc::Error) -> Self {
        use sparsegpc::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidConfig(_) | E::NonPositiveHyperparameter(_) => CliError::Config(msg),
            E::DimensionMismatch(_) | E::Parse { .. } | E::Label(_) | E::Io(_) => CliError::Data(msg),
            E::NotPositiveDefinite { .. } | E::NonFinite(_) => CliError::Numerical(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
