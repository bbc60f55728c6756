use thiserror::Error;

use crate::adapter::AdapterId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("rank {rank} exceeds the smallest dimension {limit}")]
    Rank { rank: usize, limit: usize },

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("unknown adapter {0}")]
    Routing(AdapterId),

    #[error("invalid state: {0}")]
    State(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("{needed} distinct adapters requested but only {capacity} fit on device")]
    InfeasibleBatch { needed: usize, capacity: usize },

    #[error("weight sync rejected: {0}")]
    Sync(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed adapter record: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
