use thiserror::Error;

pub type Result<T, E = MilError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MilError {
    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("shape error at {node}: {detail}")]
    Shape { node: String, detail: String },

    #[error("state error: {0}")]
    State(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("too few instances: {0}")]
    TooFewInstances(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid label: {0}")]
    InvalidLabel(String),

    #[error("training diverged at epoch {epoch} on bag {bag_id}{}", fold.map(|f| format!(" (fold {f})")).unwrap_or_default())]
    Divergence {
        fold: Option<usize>,
        epoch: usize,
        bag_id: String,
    },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid coordinates: {0}")]
    InvalidCoords(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl MilError {
    pub(crate) fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        MilError::Shape {
            node: node.into(),
            detail: detail.into(),
        }
    }

    /// Attaches a fold index to a divergence error; other variants pass through.
    pub fn with_fold(self, fold_index: usize) -> Self {
        match self {
            MilError::Divergence { epoch, bag_id, .. } => MilError::Divergence {
                fold: Some(fold_index),
                epoch,
                bag_id,
            },
            other => other,
        }
    }
}
