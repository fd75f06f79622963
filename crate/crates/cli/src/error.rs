use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

/// Failures grouped by the exit code they map to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<cpc_core::Error> for CliError {
    fn from(e: cpc_core::Error) -> Self {
        use cpc_core::Error as E;
        let msg = e.to_string();
        match e.root() {
            E::Config(_) | E::DegenerateClassCount(_) | E::SeparationInfeasible { .. } => {
                CliError::Config(msg)
            }
            E::Unlabeled
            | E::DimensionMismatch { .. }
            | E::LabelOutOfRange { .. }
            | E::NonFinite { .. }
            | E::Parse { .. }
            | E::Io { .. } => CliError::Data(msg),
            E::Diverged { .. } | E::NoValidPrototype | E::Stage { .. } => CliError::Runtime(msg),
        }
    }
}
