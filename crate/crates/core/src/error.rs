use thiserror::Error;

/// Errors produced by the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown concept `{0}`")]
    UnknownConcept(String),

    #[error("empty request: {0}")]
    EmptyRequest(&'static str),

    #[error("bad schedule: {0}")]
    BadSchedule(String),

    #[error("timestep {t} out of range for schedule of length {len}")]
    TimestepOutOfRange { t: usize, len: usize },

    #[error("invalid world: {0}")]
    InvalidWorld(String),

    #[error("invalid guidance: {0}")]
    InvalidGuidance(String),

    #[error("weight source unavailable: {0}")]
    WeightSourceUnavailable(&'static str),

    #[error("`{0}` is already fine-grained")]
    AlreadyFineGrained(String),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing embeddings: {0}")]
    MissingEmbeddings(String),

    #[error("alignment collapsed: level {0} has no captions left")]
    AlignmentCollapsed(usize),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Numerical(_) => ErrorClass::Numerical,
            Error::InvalidGuidance(_) | Error::Config(_) | Error::BadSchedule(_) => {
                ErrorClass::Usage
            }
            Error::Stage { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn at_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
