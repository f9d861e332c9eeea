//! Losses, optimisation, synthetic data, checkpoints and the training loop.

mod checkpoint;
mod data;
mod loss;
mod optim;
mod schedule;
mod trainer;

pub use checkpoint::{average_checkpoints, Checkpoint, Entry, TensorData, CONFIG_HASH_KEY, MAGIC};
pub use data::{crop_or_pad, synth_generate, Dataset, Split, SyntheticDataConfig, Utterance};
pub use loss::{class_index, focal_loss, weighted_ce, FocalLossConfig, LossConfig};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use schedule::CosineCycleSchedule;
pub use trainer::{evaluate, train, EpochLog, Retained, Selection, TrainConfig, TrainOutcome};
