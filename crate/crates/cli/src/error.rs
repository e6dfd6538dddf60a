use thiserror::Error;

/// Failures split by exit code: 1 for bad input, 2 for anything that went
/// wrong while computing.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<zstar::Error> for CliError {
    fn from(e: zstar::Error) -> Self {
        use zstar::Error as E;
        match e {
            E::InvalidArgument(_)
            | E::Shape(_)
            | E::ArchMismatch { .. }
            | E::Image { .. }
            | E::CorruptCheckpoint { .. }
            | E::CorruptTensor { .. }
            | E::Json(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Validation(format!("invalid JSON: {e}"))
    }
}

pub fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}
