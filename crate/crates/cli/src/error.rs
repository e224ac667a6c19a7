use hdsgd_core::Error as CoreError;
use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("acceptance failure: {0}")]
    Acceptance(String),
}

impl CliError {
    /// 2 config, 3 divergence, 4 acceptance, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Acceptance(_) => 4,
            CliError::Core(e) => match e {
                CoreError::Config(_)
                | CoreError::ExponentOutOfRange { .. }
                | CoreError::DegeneratePurifier(_)
                | CoreError::NoFixedPoint { .. }
                | CoreError::ClosedFormInapplicable(_) => 2,
                CoreError::Divergence { .. } => 3,
                _ => 1,
            },
            CliError::Io(_) | CliError::Csv(_) => 1,
        }
    }
}
