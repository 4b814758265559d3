//! Layers, the model graph, forward and reverse execution, and checkpoints.

mod backward;
pub mod checkpoint;
mod forward;
pub mod gradcheck;
mod layer;
mod loss;
mod model;
pub mod reference;


#[cfg(test)]
pub(crate) use backward::FLIP_WEIGHT_GRAD;
pub use backward::{Gradients, SiteGradients};
pub use forward::{ForwardRecord, Mode};
pub(crate) use forward::NodeAux;
pub use gradcheck::{gradient_check, gradient_check_with, GradCheckOptions, GradCheckReport};
pub use layer::{Layer, LayerKind, LayerNode, Source};
pub use loss::{argmax_rows, softmax_cross_entropy, softmax_cross_entropy_rows};
pub use model::{Model, ModelBuilder, Site, SiteKind};
pub use reference::{build_reference, build_reference_models, ReferenceConfig, ReferenceModels, REFERENCE_MODELS};
