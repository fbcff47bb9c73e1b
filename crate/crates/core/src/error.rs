use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dim {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    Shape { shape: Vec<usize>, reason: String },

    #[error("invalid permutation: {0}")]
    Permutation(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("input extents {shape:?} must be multiples of {multiple}")]
    Divisibility { shape: [usize; 3], multiple: usize },

    #[error(
        "attention would allocate {entries} entries (limit {limit}) in {layer}; refusing to run"
    )]
    AttentionMemory {
        layer: String,
        entries: u64,
        limit: u64,
    },

    #[error("backward called without saved forward state ({0})")]
    MissingSavedState(&'static str),

    #[error("non-finite loss; first non-finite activation in layer {layer}")]
    NonFinite { layer: String },

    #[error("serialization: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dim {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
