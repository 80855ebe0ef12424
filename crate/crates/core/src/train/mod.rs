pub mod adam;
pub mod config;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod trainer;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use config::{RunConfig, TrainConfig};
pub use metrics::Metrics;
pub use pipeline::{mean_std, prepare, run_trial, MeanStd, Summary, Trial, TrialResult};
pub use render::{render_map, Image, PALETTE};
pub use trainer::{evaluate, predict, train, train_step, EpochLog};
