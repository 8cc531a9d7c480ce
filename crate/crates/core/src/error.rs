use crate::Modality;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("modality {0} is not available")]
    ModalityUnavailable(Modality),

    #[error("label {label} out of range for {num_classes} classes")]
    Label { label: usize, num_classes: usize },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("no prototype for class {class} (modality {modality})")]
    PrototypeCoverage { class: usize, modality: Modality },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("infeasible selection: {0}")]
    InfeasibleSelection(String),

    #[error("partition infeasible: {0}")]
    PartitionInfeasible(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
}
