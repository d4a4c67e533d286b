//! Multi-client training paradigms: sequential round-robin, client-batch
//! concatenation at one server, and hierarchical sub-servers with periodic
//! adapter averaging.

mod client_batch;
mod config;
mod hierarchical;

pub use client_batch::{client_batch_backward, client_batch_step, run_client_batch};
pub use config::{StrategyConfig, StrategyMode};
pub use hierarchical::{Hierarchy, HierarchyOutcome, MergeEvent};
