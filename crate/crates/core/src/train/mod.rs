//! Weighted BCE, AdamW, the staircase schedule and the epoch loop.

mod checkpoint;
mod config;
mod loss;
mod optim;
mod trainer;


pub use checkpoint::{load_checkpoint, save_checkpoint, FORMAT_VERSION};
pub use config::{lr_at, TrainConfig, Weighting};
pub use loss::{weighted_bce, BCE_EPS};
pub use optim::{adamw_update, AdamHyper, AdamW, Moments};
pub use trainer::{
    Bookmark, EpochRecord, PartitionMetrics, Partitions, TrainHistory, TrainState, Trainer, BEST_CHECKPOINT,
    HISTORY_FILE, LAST_CHECKPOINT, TIMING_FILE,
};
