//! Per-channel importance: output-gradient sources, per-example signals,
//! streaming accumulation and the importance table.
//!
//! Scores are estimated in eval mode (BatchNorm running statistics), so every
//! example's signal is independent of the other examples in its batch and the
//! resulting tables do not depend on the batch size.

mod accumulate;
mod estimate;
mod signal;
mod source;
mod table;

pub use accumulate::{Accumulator, Estimator, SiteAccumulator};
pub use estimate::{estimate, estimate_many, estimate_sites, random_table, SiteScores};
pub use signal::{bn_gate_terms, channel_signal, group_terms, site_signals, SignalKind, Signals};
pub use source::{make_output_gradient, GradientSource, SourceKind};
pub use table::{format_score, rank_correlation, ImportanceEntry, ImportanceTable};

#[cfg(test)]
mod tests;
