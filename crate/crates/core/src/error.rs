//! Crate-wide error type.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("position {position} exceeds max context {max_context}")]
    ContextOverflow { position: usize, max_context: usize },

    #[error("degenerate batch: every target is ignored")]
    DegenerateBatch,

    #[error("invalid partition: {0}")]
    Partition(String),

    #[error("protocol order violated: {0}")]
    ProtocolOrder(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("merge error: {0}")]
    Merge(String),

    #[error("frozen base weights diverge at `{0}`")]
    Consistency(String),

    #[error("mask is not causal-plus-left-padding: {0}")]
    IncompressibleMask(String),

    #[error("invalid mask metadata: {0}")]
    InvalidMask(String),

    #[error("frame error at byte {offset}: {reason}")]
    Frame { offset: usize, reason: String },

    #[error("channel closed")]
    ChannelClosed,

    #[error("client batch incompatible: {0}")]
    BatchIncompatible(String),

    #[error("barrier timed out waiting for {missing} client(s)")]
    BarrierTimeout { missing: usize },

    #[error("threat model violated: {0}")]
    ThreatModel(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenId { id: u32, vocab: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn frame(offset: usize, reason: impl Into<String>) -> Self {
        Error::Frame {
            offset,
            reason: reason.into(),
        }
    }
}
