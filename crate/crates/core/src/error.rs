use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),
    #[error("position {position} outside 1..={k_max}")]
    PositionOutOfRange { position: usize, k_max: usize },
    #[error("relevance grade {grade} outside 0..={y_max}")]
    GradeOutOfRange { grade: u32, y_max: u32 },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("undefined: {0}")]
    Undefined(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// True for errors caused by the configuration rather than a stage run.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
