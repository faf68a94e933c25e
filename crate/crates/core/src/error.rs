//! Shared error type for the whole crate.

/// Errors surfaced by routing, simulation, and training operations.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A value handed to an operation violates its input contract
    /// (dimension mismatch, non-finite entry, malformed batch).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration parameter is out of its legal range.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A selection was requested from an empty candidate set
    /// (e.g. every expert masked out).
    #[error("empty candidate set: {0}")]
    EmptyCandidates(String),

    /// Internal protocol contract broken; indicates a caller bug rather
    /// than bad data (e.g. a routed token without an expert output).
    #[error("contract violation: {0}")]
    ContractViolation(String),
}

pub type Result<T> = std::result::Result<T, Error>;
