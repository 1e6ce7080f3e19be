//! Batch pipeline over [`mtdbn`]: pretrain, fine-tune, embed, retrieve,
//! predict and evaluate, each driven by one JSON [`RunConfig`] and writing
//! every artifact under an output directory.

pub mod commands;
pub mod config;

pub use commands::*;
pub use config::RunConfig;

/// Failure of a command, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric divergence: {0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }
}

impl From<mtdbn::Error> for CliError {
    fn from(e: mtdbn::Error) -> Self {
        use mtdbn::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::UnknownKind(_) => CliError::Config(msg),
            E::Divergence { .. } | E::NonFiniteGradient { .. } => CliError::Divergence(msg),
            _ => CliError::Data(msg),
        }
    }
}
