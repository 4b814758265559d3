//! Structured channel pruning driven by global importance estimates.
//!
//! The crate bundles a small neural-network runtime (dense tensors, conv/linear/BN
//! layers, reverse-mode backward over a layer graph) with the pieces needed to
//! rank every prunable channel of a trained network by a first-order
//! activation-times-gradient criterion, prune the lowest-ranked channels
//! globally, and measure what that does to test accuracy.
//!
//! Module map:
//! - [`tensor`]: dense arrays and math kernels.
//! - [`nn`]: layers, model graph, forward/backward, checkpoints, reference models.
//! - [`importance`]: output-gradient sources, per-channel signal accumulation, estimators.
//! - [`pruning`]: global ranking, masking, structural compaction.
//! - [`data`]: synthetic glyph datasets and the IDX container format.
//! - [`harness`]: training, evaluation, prune sweeps, config and CLI.

pub mod data;
pub mod error;
pub mod harness;
pub mod importance;
pub mod nn;
pub mod par;
pub mod pruning;
pub mod tensor;

pub use error::{Error, Result};
