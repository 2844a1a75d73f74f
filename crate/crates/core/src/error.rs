use thiserror::Error;

use crate::types::Violation;

pub type Result<T> = std::result::Result<T, NavError>;

#[derive(Debug, Error)]
pub enum NavError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("stream failed validation ({} violation(s)): {}", .0.len(), fmt_violations(.0))]
    Validation(Vec<Violation>),

    #[error("missing relevance for pooled tiles {0:?}")]
    MissingRelevance(Vec<usize>),

    #[error("duplicate archive case `{0}`")]
    DuplicateCase(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<NavError>,
    },
}

impl NavError {
    /// Wraps the error with the pipeline stage that produced it.
    pub fn at(self, stage: &'static str) -> Self {
        NavError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error with stage labels peeled off.
    pub fn root(&self) -> &NavError {
        match self {
            NavError::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code: 2 validation, 3 relevance coverage, 4 I/O, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            NavError::Validation(_) | NavError::DimensionMismatch { .. } => 2,
            NavError::MissingRelevance(_) => 3,
            NavError::Io(_) | NavError::Format(_) | NavError::Csv(_) | NavError::Json(_) => 4,
            _ => 1,
        }
    }
}

fn fmt_violations(v: &[Violation]) -> String {
    v.iter()
        .take(5)
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
