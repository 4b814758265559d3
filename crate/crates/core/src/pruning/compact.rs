use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mask::{apply_mask, PruneMask};
use super::trace::{kept_indices, trace_channel_users, ChannelUse};
use crate::error::Result;
use crate::nn::{Layer, LayerNode, Model};
use crate::tensor::{Scalar, Tensor};

#[cfg(test)]
thread_local! {
    /// Mutation hook for tests: reads consumer input slices one channel off.
    pub(crate) static SHIFT_INPUT_SLICE: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

/// Keeps only the listed indices along `axis`.
fn select<T: Scalar>(t: &Tensor<T>, axis: usize, indices: &[usize]) -> Result<Tensor<T>> {
    let shape = t.shape();
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let extent = shape[axis];
    let mut data = Vec::with_capacity(outer * indices.len() * inner);
    for o in 0..outer {
        for &i in indices {
            let start = (o * extent + i) * inner;
            data.extend_from_slice(&t.data()[start..start + inner]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = indices.len();
    Tensor::new(&new_shape, data)
}

fn input_indices(keep: &[bool], block: usize) -> Vec<usize> {
    let idx = kept_indices(keep, block);
    #[cfg(test)]
    if SHIFT_INPUT_SLICE.with(|s| s.get()) {
        let extent = keep.len() * block;
        return idx.into_iter().map(|i| (i + block) % extent).collect();
    }
    idx
}

/// Physically removes pruned channels: producer rows, BatchNorm entries and
/// the matching input slices of every consumer. Surviving BatchNorm
/// statistics are carried over unchanged.
pub fn compact<T: Scalar>(model: &Model<T>, mask: &PruneMask) -> Result<Model<T>> {
    mask.validate(model)?;
    let mut layers: Vec<Layer<T>> = model.nodes().iter().map(|n| n.layer.clone()).collect();
    let sites: Vec<_> = model.prunable_sites().cloned().collect();
    for (site, keep) in sites.iter().zip(&mask.keep) {
        if keep.iter().all(|&k| k) {
            continue;
        }
        let rows = kept_indices(keep, 1);
        for u in trace_channel_users(model, site.id)? {
            match (u, &mut layers[node_of(u)]) {
                (ChannelUse::Producer { .. }, Layer::Conv2d { weight, bias, .. })
                | (ChannelUse::Producer { .. }, Layer::Linear { weight, bias }) => {
                    *weight = select(weight, 0, &rows)?;
                    if let Some(b) = bias {
                        *b = select(b, 0, &rows)?;
                    }
                }
                (
                    ChannelUse::Norm { .. },
                    Layer::BatchNorm {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                        ..
                    },
                ) => {
                    for t in [gamma, beta, running_mean, running_var] {
                        *t = select(t, 0, &rows)?;
                    }
                }
                (ChannelUse::ConvInput { .. }, Layer::Conv2d { weight, .. }) => {
                    *weight = select(weight, 1, &input_indices(keep, 1))?;
                }
                (ChannelUse::LinearInput { block, .. }, Layer::Linear { weight, .. }) => {
                    *weight = select(weight, 1, &input_indices(keep, block))?;
                }
                _ => unreachable!("channel uses are classified by layer kind"),
            }
        }
    }
    let nodes = layers
        .into_iter()
        .zip(model.nodes())
        .map(|(layer, old)| LayerNode::new(layer, old.inputs.clone(), old.prunable))
        .collect();
    Model::from_nodes(nodes, model.input_shape(), model.num_classes())
}

fn node_of(u: ChannelUse) -> usize {
    match u {
        ChannelUse::Producer { node }
        | ChannelUse::Norm { node }
        | ChannelUse::ConvInput { node }
        | ChannelUse::LinearInput { node, .. } => node,
    }
}

/// Largest absolute logit difference between the masked and the compacted
/// model over `trials` uniform random inputs in `[0, 1)`.
pub fn validate_equivalence<T: Scalar>(
    model: &Model<T>,
    mask: &PruneMask,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let masked = apply_mask(model, mask)?;
    let compacted = compact(model, mask)?;
    if trials == 0 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![trials];
    shape.extend_from_slice(model.input_shape());
    let len = shape.iter().product();
    let x = Tensor::new(&shape, (0..len).map(|_| T::of(rng.gen::<f64>())).collect())?;
    masked.infer(&x)?.max_abs_diff(&compacted.infer(&x)?)
}
