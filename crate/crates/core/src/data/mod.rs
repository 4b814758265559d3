//! Datasets: a seeded synthetic glyph generator, the IDX binary container,
//! and deterministic batching.

mod dataset;
mod glyphs;
pub mod idx;

pub use dataset::{Dataset, Split};
pub use glyphs::{generate_shapes, generate_split, GlyphSpec, GLYPH_NAMES};
pub use idx::{load_idx, write_idx};
