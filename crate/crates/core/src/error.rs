use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: String },

    #[error("loss must be a scalar, got {0} elements")]
    NonScalarLoss(usize),

    #[error("parameter {0} has no gradient")]
    MissingGrad(String),

    #[error("total length {total} is infeasible for {n_phonemes} phonemes (every phoneme needs at least one frame)")]
    InfeasibleLength { total: usize, n_phonemes: usize },

    #[error("silent audio: no f0 can be estimated")]
    SilentAudio,

    #[error("emotion label {0} out of range (expected 0..4)")]
    BadLabel(usize),

    #[error("phoneme id {id} out of range (inventory size {inventory})")]
    BadPhonemeId { id: usize, inventory: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("config hash mismatch: checkpoint {checkpoint:#018x} vs current {current:#018x}")]
    ConfigHashMismatch { checkpoint: u64, current: u64 },

    #[error("container format error: {0}")]
    Container(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
