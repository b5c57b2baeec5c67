//! Process-level error kinds, one per documented exit code.

use pdx_core::CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad or inconsistent configuration — exit code 2.
    #[error("{0}")]
    Config(String),

    /// Unreadable, corrupt, or mismatched data/checkpoint files — exit
    /// code 3.
    #[error("{0}")]
    Corrupt(String),

    /// Training diverged — exit code 4.
    #[error("{0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Corrupt(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }
}

/// Map a pipeline error escaping a training or data-handling stage onto the
/// exit-code taxonomy: divergence is its own code, everything else means a
/// bad artifact on disk or an impossible dataset.
pub fn from_core(e: CoreError) -> CliError {
    match e {
        CoreError::TrainingDiverged { .. } => CliError::Divergence(e.to_string()),
        other => CliError::Corrupt(other.to_string()),
    }
}
