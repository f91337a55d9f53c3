//! Error type shared across the crate.

use thiserror::Error;

/// Anything that can go wrong inside the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration key is unknown, unparsable, or out of its legal range.
    #[error("config: {0}")]
    Config(String),

    /// Tensor or network shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An environment id that no factory knows about.
    #[error("unknown environment `{0}`")]
    UnknownEnv(String),

    /// A task factor lies outside the range declared by the env schema.
    #[error("factor `{name}` = {value} outside [{lo}, {hi}]")]
    FactorOutOfRange {
        name: String,
        value: f64,
        lo: f64,
        hi: f64,
    },

    /// An action that the environment's action space rejects.
    #[error("invalid action: {0}")]
    InvalidAction(String),

    /// `step` was called on a finished or never-reset episode.
    #[error("episode is not active: {0}")]
    EpisodeNotActive(String),

    /// An operation needed data that is not there (empty buffer, short context).
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// `adam_step` ran before any backward pass filled the gradient slots.
    #[error("no gradients accumulated in store `{0}`")]
    NoGradients(String),

    /// A NaN or infinity surfaced where a finite number was required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Generic numeric failure (singular system, divergence, empty reduction).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Two parameters were registered under the same name.
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    /// A parameter name or id that the store does not contain.
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    /// Two task factors claimed the same latent dimension.
    #[error("factors `{first}` and `{second}` both map to latent dim {dim}")]
    EntangledFactors {
        first: String,
        second: String,
        dim: usize,
    },

    /// No speculator is registered for the requested environment.
    #[error("no speculator for environment `{0}`")]
    MissingSpeculator(String),

    /// A run directory is missing an expected artifact.
    #[error("artifact: {0}")]
    Artifact(String),

    /// Checkpoint bytes that do not parse as the expected container.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the command-line front end: config problems are
    /// distinguishable from numeric blow-ups so scripts can react.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnknownEnv(_) => 2,
            Error::NonFinite(_) | Error::Numeric(_) => 3,
            _ => 1,
        }
    }
}
