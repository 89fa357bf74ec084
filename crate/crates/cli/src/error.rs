use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] paranet_core::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }

    /// 2 for configuration problems, 3 for bad or missing data, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use paranet_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io(_) => 3,
            CliError::Core(e) if e.is_config() => 2,
            CliError::Core(E::Parse { .. } | E::Ingest(_) | E::Input(_) | E::Empty(_) | E::Io(_)) => 3,
            CliError::Core(_) => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
