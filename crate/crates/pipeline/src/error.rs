use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Core(#[from] synergies_core::Error),

    #[error("configuration: {0}")]
    Config(String),

    #[error("stage `{stage}` needs `{requires}`; run `build {requires}` first")]
    MissingUpstream { stage: String, requires: String },

    #[error("missing input file {}", .0.display())]
    MissingInput(PathBuf),

    #[error("artifact {} is corrupt: manifest hash {expected}, file hash {actual}", path.display())]
    Corrupt {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("artifact store {} is locked by another run (remove the lock file if stale)", .0.display())]
    Locked(PathBuf),

    #[error("unknown stage `{0}`")]
    UnknownStage(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

impl PipelineError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the failure comes from what the user asked for rather than
    /// from the data or the machine.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            PipelineError::Core(synergies_core::Error::Lookup(_) | synergies_core::Error::Config(_))
                | PipelineError::Config(_)
                | PipelineError::UnknownStage(_)
                | PipelineError::MissingUpstream { .. }
        )
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
