//! The classifier: pixel embedding, stages of IGSSB blocks, and the head.

pub mod block;
pub mod checkpoint;
pub mod config;
pub mod flops;
pub mod layers;
pub mod model;

pub use block::{FeedForward, Igssb, Operator};
pub use config::{ModelConfig, OperatorMode};
pub use flops::{count_flops, FlopCount};
pub use model::Model;
