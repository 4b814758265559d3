//! Training, evaluation, the prune-sweep protocol, configuration and the
//! command-line front end.

pub mod cli;
mod config;
mod sweep;
mod train;

pub use config::{DataSize, DatasetSpec, ExperimentConfig, Method, PruneGrid, SweepSpec, KEYS};
pub use sweep::{
    prune_sweep, reference_config, resolve_prune_counts, run_experiment, train_reference, SweepResult,
    SweepRow, TrainedRun,
};
pub use train::{evaluate, train, EpochLog, TrainConfig};
