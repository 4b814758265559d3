//! Fixed desk-scale architectures used by the experiments and tests.
//!
//! | name           | layout                                                             | params (1×16×16 in, 4 classes) |
//! |----------------|--------------------------------------------------------------------|--------------------------------|
//! | `mlp_small`    | flatten → [linear 32 → BN → ReLU] ×2 → linear                       | 9 476                          |
//! | `cnn_small`    | [conv3×3 16/32/32 → BN → ReLU → pool] ×3 → flatten → linear         | 14 644                         |
//! | `cnn_residual` | stem conv 16 → residual block (16, 16) → conv 32 → flatten → linear | 10 036                         |
//!
//! Convs and linears followed by BatchNorm carry no bias. In `cnn_residual`
//! the stem conv and the block's second conv feed the residual add and are
//! therefore not prunable.

use super::layer::Source;
use super::model::{Model, ModelBuilder};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const REFERENCE_MODELS: [&str; 3] = ["mlp_small", "cnn_small", "cnn_residual"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReferenceConfig {
    /// `[channels, height, width]`; height and width must be divisible by 8.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig {
            input_shape: [1, 16, 16],
            num_classes: 4,
            seed: 0,
        }
    }
}

pub struct ReferenceModels<T> {
    pub mlp_small: Model<T>,
    pub cnn_small: Model<T>,
    pub cnn_residual: Model<T>,
}

pub fn build_reference_models<T: Scalar>(cfg: &ReferenceConfig) -> Result<ReferenceModels<T>> {
    Ok(ReferenceModels {
        mlp_small: mlp_small(cfg)?,
        cnn_small: cnn_small(cfg)?,
        cnn_residual: cnn_residual(cfg)?,
    })
}

pub fn build_reference<T: Scalar>(name: &str, cfg: &ReferenceConfig) -> Result<Model<T>> {
    match name {
        "mlp_small" => mlp_small(cfg),
        "cnn_small" => cnn_small(cfg),
        "cnn_residual" => cnn_residual(cfg),
        other => Err(Error::Input(format!(
            "unknown model `{other}` (expected one of {REFERENCE_MODELS:?})"
        ))),
    }
}

fn check_input(cfg: &ReferenceConfig) -> Result<()> {
    let [c, h, w] = cfg.input_shape;
    if c == 0 || h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Input(format!(
            "reference models need a non-empty input with sides divisible by 8, got {:?}",
            cfg.input_shape
        )));
    }
    if cfg.num_classes < 2 {
        return Err(Error::Input("need at least two classes".into()));
    }
    Ok(())
}

pub fn mlp_small<T: Scalar>(cfg: &ReferenceConfig) -> Result<Model<T>> {
    check_input(cfg)?;
    let mut b = ModelBuilder::<T>::new(&cfg.input_shape, cfg.seed);
    let mut x = b.flatten(Source::Input);
    for _ in 0..2 {
        x = b.linear(x, 32, false, true);
        x = b.batch_norm(x);
        x = b.relu(x);
    }
    b.linear(x, cfg.num_classes, true, false);
    b.build(cfg.num_classes)
}

fn conv_block<T: Scalar>(b: &mut ModelBuilder<T>, x: Source, width: usize, prunable: bool) -> Source {
    let x = b.conv(x, width, 3, 1, 1, false, prunable);
    let x = b.batch_norm(x);
    b.relu(x)
}

pub fn cnn_small<T: Scalar>(cfg: &ReferenceConfig) -> Result<Model<T>> {
    check_input(cfg)?;
    let mut b = ModelBuilder::<T>::new(&cfg.input_shape, cfg.seed);
    let x = conv_block(&mut b, Source::Input, 16, true);
    let x = b.max_pool(x, 2);
    let x = conv_block(&mut b, x, 32, true);
    let x = b.max_pool(x, 2);
    let x = conv_block(&mut b, x, 32, true);
    let x = b.avg_pool(x, 2);
    let x = b.flatten(x);
    b.linear(x, cfg.num_classes, true, false);
    b.build(cfg.num_classes)
}

pub fn cnn_residual<T: Scalar>(cfg: &ReferenceConfig) -> Result<Model<T>> {
    check_input(cfg)?;
    let mut b = ModelBuilder::<T>::new(&cfg.input_shape, cfg.seed);
    let stem = conv_block(&mut b, Source::Input, 16, false);
    let stem = b.max_pool(stem, 2);
    let branch = conv_block(&mut b, stem, 16, true);
    let branch = b.conv(branch, 16, 3, 1, 1, false, false);
    let branch = b.batch_norm(branch);
    let x = b.add(stem, branch);
    let x = b.relu(x);
    let x = b.max_pool(x, 2);
    let x = conv_block(&mut b, x, 32, true);
    let x = b.avg_pool(x, 2);
    let x = b.flatten(x);
    b.linear(x, cfg.num_classes, true, false);
    b.build(cfg.num_classes)
}
