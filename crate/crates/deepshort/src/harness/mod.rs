//! Experiment plumbing: run configuration, datasets, the optimizer,
//! checkpoints, training loops, and the command-line interface.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod optim;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointData};
pub use config::{DataSource, ExperimentKind, LrSpec, RunConfig};
pub use data::{load_dataset, Dataset, Sample};
pub use optim::{lr_at, AdamW};
pub use train::{train, TrainOutcome};
