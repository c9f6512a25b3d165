//! Shared-backbone multi-task CNN with hand-written reverse-mode gradients.

mod checkpoint;
mod layers;
mod net;

use std::path::PathBuf;

pub use checkpoint::{Checkpoint, NamedArray, CHECKPOINT_VERSION};
pub use layers::global_avg_pool_backward;
pub use net::{
    sigmoid, ActivationPattern, BlockCache, ConvBlock, ForwardCache, Gradients, Head, HeadCache, Mode, MultiTaskNet, NetConfig,
    NetParams, ParamKind, ParamView, ParamViewMut, SampleCache,
};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("input shape {actual:?} does not match expected {expected:?}")]
    InputShape { expected: (usize, usize, usize), actual: (usize, usize, usize) },
    #[error("batch norm in train mode needs a batch of at least 2")]
    BatchTooSmallForBN,
    #[error("stale forward cache: {0}")]
    StaleCache(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}
