use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("observation schema mismatch: expected {expected}, got {actual}")]
    Schema { expected: String, actual: String },

    #[error("non-finite value after {stage} layer {layer}")]
    NumericalOverflow { stage: &'static str, layer: usize },

    #[error("non-finite {term} term in bound estimate")]
    NonFiniteTerm { term: &'static str },

    #[error("degenerate posterior: every importance weight is zero")]
    DegeneratePosterior,

    #[error("action space of {actions} actions exceeds the enumeration limit of {limit}")]
    Capacity { actions: u128, limit: u128 },

    #[error("action mask has no valid entry")]
    EmptyMask,

    #[error("no valid action after {samples_drawn} samples ({batches} batches) in state {state}")]
    Starvation { state: String, samples_drawn: usize, batches: usize },

    #[error("action {action:?} does not fit action space {dims}x{categories}")]
    ActionOutOfRange { action: Vec<usize>, dims: usize, categories: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid action {action:?} executed in state {state}")]
    InvalidAction { action: Vec<usize>, state: String },

    #[error("step called on a finished episode")]
    EpisodeDone,

    #[error("{path}: {message}")]
    Config { path: String, message: String },

    #[error("unknown environment version `{0}`")]
    UnknownVersion(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("training aborted: {0}")]
    Aborted(String),

    #[error("training aborted: env {env}, rollout step {step}: {source}")]
    RolloutStarved {
        env: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { path: path.into(), message: message.into() }
    }
}
