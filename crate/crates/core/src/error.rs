use thiserror::Error;

/// Errors raised by the verification toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum BpoError {
    #[error("unknown token: {0:?}")]
    UnknownToken(String),
    #[error("prompt has no tokens")]
    EmptyPrompt,
    #[error("prompt has {len} tokens, encoder supports at most {max}")]
    PromptTooLong { len: usize, max: usize },
    #[error("prompt has no suffix tokens")]
    EmptySuffix,
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("interpolation weight {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("bad dimensions: {0}")]
    BadDimensions(String),
    #[error("unknown concept: {0:?}")]
    UnknownConcept(String),
    #[error("unknown model: {0:?}")]
    UnknownModel(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("invalid registry: {0}")]
    InvalidRegistry(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("no semantic flip within {0} iterations")]
    NotFound(usize),
    #[error("initial prompt already flips semantics")]
    InitialPromptFlipped,
    #[error("interpolation endpoints do not straddle the boundary")]
    EndpointsAgree,
    #[error("epsilon must be positive, got {0}")]
    NonPositiveEpsilon(f64),
    #[error("value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("no candidates to select from")]
    EmptyCandidates,
    #[error("every candidate pipeline run failed for target {0:?}")]
    NoViableCandidate(String),
    #[error("family rejection sampling exhausted after {0} attempts")]
    FamilyRejected(usize),
    #[error("endpoint transport error: {0}")]
    Transport(String),
    #[error("endpoint protocol error: {0}")]
    Protocol(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<std::io::Error> for BpoError {
    fn from(err: std::io::Error) -> Self {
        BpoError::Io(err.to_string())
    }
}

impl From<serde_json::Error> for BpoError {
    fn from(err: serde_json::Error) -> Self {
        BpoError::Serde(err.to_string())
    }
}

pub type Result<T, E = BpoError> = std::result::Result<T, E>;
