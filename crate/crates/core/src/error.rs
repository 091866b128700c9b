use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DietError {
    #[error(transparent)]
    Tensor(#[from] diet_autograd::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error("record {record}: {message}")]
    Record { record: usize, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("unknown {kind} label(s): {labels:?}")]
    UnknownLabels {
        kind: &'static str,
        labels: Vec<String>,
    },
    #[error("tag {0:?} is not in the tag set")]
    UnknownTag(String),
    #[error("overlapping entity spans {first:?} and {second:?}")]
    OverlappingSpans {
        first: (usize, usize),
        second: (usize, usize),
    },
    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("no sentence vectors for text {0:?}")]
    MissingSentenceVectors(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Invalid(String),
}

impl DietError {
    /// Stable snake_case name of the variant, for machine-readable output.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Tensor(_) => "tensor",
            Self::Io { .. } => "io",
            Self::Parse { .. } => "parse",
            Self::Record { .. } => "record",
            Self::Config(_) => "config",
            Self::EmptyDataset(_) => "empty_dataset",
            Self::UnknownLabels { .. } => "unknown_labels",
            Self::UnknownTag(_) => "unknown_tag",
            Self::OverlappingSpans { .. } => "overlapping_spans",
            Self::Divergence { .. } => "divergence",
            Self::MissingSentenceVectors(_) => "missing_sentence_vectors",
            Self::Checkpoint(_) => "checkpoint",
            Self::Invalid(_) => "invalid",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = DietError> = std::result::Result<T, E>;
