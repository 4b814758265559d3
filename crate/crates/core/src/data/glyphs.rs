use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Class names in label order.
pub const GLYPH_NAMES: [&str; 10] = [
    "hbar", "vbar", "cross", "ring", "corner", "checker", "diagonal", "square", "x", "triangle",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlyphSpec {
    /// Number of classes, 2..=10.
    pub num_classes: usize,
    pub per_class: usize,
    /// Side length in pixels, at least 12.
    pub image_size: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for GlyphSpec {
    fn default() -> Self {
        GlyphSpec {
            num_classes: 4,
            per_class: 200,
            image_size: 16,
            noise: 0.1,
            seed: 0,
        }
    }
}

/// Whether normalised point `(u, v)` lies on glyph `class` drawn with
/// stroke half-width `t`.
fn inside(class: usize, u: f64, v: f64, t: f64) -> bool {
    let in_box = u.abs() <= 1.0 && v.abs() <= 1.0;
    let hbar = v.abs() <= t && u.abs() <= 1.0;
    let vbar = u.abs() <= t && v.abs() <= 1.0;
    let diag = (u - v).abs() <= t * std::f64::consts::SQRT_2 && in_box;
    let anti = (u + v).abs() <= t * std::f64::consts::SQRT_2 && in_box;
    match class {
        0 => hbar,
        1 => vbar,
        2 => hbar || vbar,
        3 => ((u * u + v * v).sqrt() - 0.75).abs() <= t,
        4 => ((u + 0.8).abs() <= t && v.abs() <= 1.0) || ((v - 0.8).abs() <= t && u.abs() <= 1.0),
        5 => in_box && (((u + 1.0) * 2.0).floor() as i64 + ((v + 1.0) * 2.0).floor() as i64) % 2 == 0,
        6 => diag,
        7 => (u.abs().max(v.abs()) - 0.8).abs() <= t,
        8 => diag || anti,
        _ => (-0.8..=0.8).contains(&v) && u.abs() <= (v + 0.8) / 1.6,
    }
}

/// Renders `per_class` examples of each of `num_classes` glyphs at random
/// positions, scales and stroke widths, adds pixel noise, and clamps to
/// `[0, 1]`. Examples are stored in a seeded shuffled order.
pub fn generate_shapes(spec: &GlyphSpec) -> Result<Dataset> {
    if !(2..=GLYPH_NAMES.len()).contains(&spec.num_classes) {
        return Err(Error::Input(format!(
            "glyph datasets support 2..=10 classes, got {}",
            spec.num_classes
        )));
    }
    if spec.image_size < 12 {
        return Err(Error::Input(format!(
            "glyph images need a side of at least 12, got {}",
            spec.image_size
        )));
    }
    if spec.per_class == 0 {
        return Err(Error::Input("per-class count must be positive".into()));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::Input(format!("invalid noise level {}", spec.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<usize> = (0..spec.num_classes)
        .flat_map(|c| std::iter::repeat_n(c, spec.per_class))
        .collect();
    labels.shuffle(&mut rng);

    let size = spec.image_size;
    let s = size as f64;
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut pixels = Vec::with_capacity(labels.len() * size * size);
    for &class in &labels {
        let radius = rng.gen_range(0.28..0.42) * s;
        let cx = s / 2.0 + rng.gen_range(-0.12..0.12) * s;
        let cy = s / 2.0 + rng.gen_range(-0.12..0.12) * s;
        let half_width = rng.gen_range(0.6..1.1) / radius;
        let intensity = rng.gen_range(0.75..1.0);
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 + 0.5 - cx) / radius;
                let v = (y as f64 + 0.5 - cy) / radius;
                let mut p = if inside(class, u, v, half_width) { intensity } else { 0.0 };
                if spec.noise > 0.0 {
                    p += noise.sample(&mut rng);
                }
                pixels.push(p.clamp(0.0, 1.0) as f32);
            }
        }
    }
    let images = Tensor::new(&[labels.len(), 1, size, size], pixels)?;
    Dataset::new(images, Some(labels), spec.num_classes, Split::Train, spec.seed)
}

/// Independent train and test draws of the same glyph distribution.
pub fn generate_split(
    spec: &GlyphSpec,
    train_per_class: usize,
    test_per_class: usize,
) -> Result<(Dataset, Dataset)> {
    let train = generate_shapes(&GlyphSpec {
        per_class: train_per_class,
        ..*spec
    })?;
    let mut test = generate_shapes(&GlyphSpec {
        per_class: test_per_class,
        seed: spec.seed ^ 0x7e57_5eed_0000_0001,
        ..*spec
    })?;
    test.split = Split::Test;
    test.seed = spec.seed;
    Ok((train, test))
}
