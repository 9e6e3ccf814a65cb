//! Dataset sampling, consistency mixing, Adam, checkpoints and the
//! adversarial training loop.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod mix;
pub mod state;
pub mod trainer;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use checkpoint::Checkpoint;
pub use config::{learning_rate, TrainConfig};
pub use data::{Batch, Dataset, ImageSet};
pub use mix::{mix_images, mix_with, sample_region, side_range, Mix};
pub use state::{RngState, TrainState};
pub use trainer::{StepRecord, Trainer, LOG_HEADER};
