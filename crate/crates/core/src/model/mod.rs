//! The toy LLaMA-style transformer and its A/B/C partition.

mod block;
mod cache;
pub mod checkpoint;
mod config;
mod grads;
mod linear;
mod merge;
mod segment;

pub use block::{Block, BlockSaved};
pub use cache::{KvCache, LayerCache};
pub use config::{ModelConfig, PartitionSpec};
pub use grads::Grads;
pub use linear::{Linear, LinearGrads, Lora};
pub use merge::fedavg_merge;
pub use segment::{
    build_embedding_split, build_monolithic, build_partitioned, is_trainable, GradMode, Role,
    SegmentGrads, SegmentInput, SegmentModel, SegmentTape, TapeNode,
};
