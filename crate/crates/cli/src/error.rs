use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("stage `{stage}` needs `{needs}` to run first")]
    Dependency { stage: String, needs: String },

    #[error("ledger: {0}")]
    Ledger(String),

    #[error(transparent)]
    Core(#[from] tapm_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 2 for configuration problems, 3 for missing upstream stages, 4 for
    /// numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use tapm_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Ledger(_) => 2,
            CliError::Dependency { .. } => 3,
            CliError::Core(E::Divergence { .. } | E::NonFiniteGradient { .. } | E::DegenerateDlr { .. }) => 4,
            CliError::Core(E::InvalidArgument(_) | E::Serde(_)) => 2,
            CliError::Core(_) | CliError::Io(_) => 1,
        }
    }
}

impl From<toml::de::Error> for CliError {
    fn from(e: toml::de::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<toml::ser::Error> for CliError {
    fn from(e: toml::ser::Error) -> Self {
        CliError::Core(tapm_core::Error::Serde(e.to_string()))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(tapm_core::Error::Serde(e.to_string()))
    }
}
