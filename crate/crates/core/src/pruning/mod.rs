//! Global ranking, channel masks, structural compaction and equivalence checks.

mod compact;
mod mask;
mod plan;
mod trace;

pub use compact::{compact, validate_equivalence};
pub use mask::{apply_mask, PruneMask};
pub use plan::{rank_global, rank_global_with, PrunePlan, RankOptions, RankedChannel};
pub use trace::{trace_channel_users, zero_incoming, zero_outgoing, ChannelUse};

