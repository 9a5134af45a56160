use thiserror::Error;

/// Errors raised by the engine. Each variant maps to one failure class so the
/// CLI can translate them into exit codes without string matching.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("undefined ratio: value sequence is zero at t={0}")]
    UndefinedRatio(usize),

    #[error("unsupported combination: {0}")]
    Combination(String),

    #[error("registry error: {0}")]
    Registry(String),

    #[error("missing saved statistics: {0}")]
    MissingSaved(String),
}

pub type Result<T> = std::result::Result<T, Error>;
