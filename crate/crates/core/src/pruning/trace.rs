use crate::error::{Error, Result};
use crate::nn::{Layer, Model};
use crate::tensor::{Scalar, Tensor};

/// How a node touches the channels of a prunable site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelUse {
    /// The Conv2d/Linear node producing the channels (output rows).
    Producer { node: usize },
    /// A BatchNorm normalising them.
    Norm { node: usize },
    /// A Conv2d reading them as input channels.
    ConvInput { node: usize },
    /// A Linear reading them as column blocks of `block` features each.
    LinearInput { node: usize, block: usize },
}

/// Follows a site's channels from their producer through BatchNorm, ReLU
/// and pooling to the weighted layers that read them. Anything else on the
/// way (a residual add, the model output) is unsupported.
pub fn trace_channel_users<T: Scalar>(model: &Model<T>, site_id: usize) -> Result<Vec<ChannelUse>> {
    let site = model
        .sites()
        .get(site_id)
        .ok_or_else(|| Error::Input(format!("no site {site_id}")))?;
    let consumers = model.consumers();
    let shapes = model.node_shapes()?;
    let last = model.nodes().len() - 1;
    let mut uses = vec![ChannelUse::Producer { node: site.node }];
    let mut frontier = vec![site.node];
    while let Some(i) = frontier.pop() {
        if i == last {
            return Err(Error::Capability {
                node: i,
                message: "pruned channels would reach the model output".into(),
            });
        }
        for &c in &consumers[i] {
            let unsupported = |what: &str| Error::Capability {
                node: c,
                message: format!("cannot rewire channels through {what}"),
            };
            match &model.nodes()[c].layer {
                Layer::BatchNorm { .. } => {
                    uses.push(ChannelUse::Norm { node: c });
                    frontier.push(c);
                }
                Layer::ReLU | Layer::MaxPool { .. } | Layer::AvgPool { .. } => frontier.push(c),
                Layer::Conv2d { .. } => uses.push(ChannelUse::ConvInput { node: c }),
                Layer::Linear { .. } => uses.push(ChannelUse::LinearInput { node: c, block: 1 }),
                Layer::Flatten => {
                    let block: usize = shapes[i][1..].iter().product();
                    for &f in &consumers[c] {
                        match model.nodes()[f].layer {
                            Layer::Linear { .. } => uses.push(ChannelUse::LinearInput { node: f, block }),
                            _ => {
                                return Err(Error::Capability {
                                    node: f,
                                    message: "flattened channels must feed a linear layer".into(),
                                })
                            }
                        }
                    }
                    if c == last || consumers[c].is_empty() {
                        return Err(unsupported("a flatten at the model output"));
                    }
                }
                Layer::ResidualAdd => return Err(unsupported("a residual add")),
            }
        }
    }
    uses.sort_by_key(|u| match *u {
        ChannelUse::Producer { node }
        | ChannelUse::Norm { node }
        | ChannelUse::ConvInput { node }
        | ChannelUse::LinearInput { node, .. } => node,
    });
    uses.dedup();
    Ok(uses)
}

/// Indices along an axis that survive, expanded by a block size.
pub(crate) fn kept_indices(keep: &[bool], block: usize) -> Vec<usize> {
    keep.iter()
        .enumerate()
        .filter(|(_, &k)| k)
        .flat_map(|(c, _)| c * block..(c + 1) * block)
        .collect()
}

/// Writes `value` into every element whose index along `axis` is listed.
fn fill_along<T: Scalar>(t: &mut Tensor<T>, axis: usize, indices: &[usize], value: T) {
    let shape = t.shape().to_vec();
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let extent = shape[axis];
    let data = t.data_mut();
    for o in 0..outer {
        for &i in indices {
            let start = (o * extent + i) * inner;
            data[start..start + inner].fill(value);
        }
    }
}

fn zero_rows<T: Scalar>(t: &mut Tensor<T>, axis: usize, indices: &[usize]) {
    fill_along(t, axis, indices, T::zero());
}

/// Zeroes every weight and bias producing `channel` of the site. The
/// attached BatchNorm gets `β = 0` and running mean 0 as well, so the
/// normalised channel is exactly zero too.
pub fn zero_incoming<T: Scalar>(model: &mut Model<T>, site_id: usize, channel: usize) -> Result<()> {
    let site = model
        .sites()
        .get(site_id)
        .cloned()
        .ok_or_else(|| Error::Input(format!("no site {site_id}")))?;
    if channel >= site.channels {
        return Err(Error::Input(format!(
            "site {site_id} has {} channels, asked for {channel}",
            site.channels
        )));
    }
    let nodes = model.nodes_mut();
    match &mut nodes[site.node].layer {
        Layer::Conv2d { weight, bias, .. } | Layer::Linear { weight, bias } => {
            zero_rows(weight, 0, &[channel]);
            if let Some(b) = bias {
                zero_rows(b, 0, &[channel]);
            }
        }
        _ => unreachable!("sites sit on weighted layers"),
    }
    if let Some(bn) = site.bn {
        if let Layer::BatchNorm {
            beta, running_mean, ..
        } = &mut nodes[bn].layer
        {
            zero_rows(beta, 0, &[channel]);
            zero_rows(running_mean, 0, &[channel]);
        }
    }
    Ok(())
}

/// Zeroes every weight that reads `channel` of the site downstream.
pub fn zero_outgoing<T: Scalar>(model: &mut Model<T>, site_id: usize, channel: usize) -> Result<()> {
    let uses = trace_channel_users(model, site_id)?;
    let channels = model.sites()[site_id].channels;
    if channel >= channels {
        return Err(Error::Input(format!(
            "site {site_id} has {channels} channels, asked for {channel}"
        )));
    }
    let nodes = model.nodes_mut();
    for u in uses {
        match u {
            ChannelUse::ConvInput { node } => {
                if let Layer::Conv2d { weight, .. } = &mut nodes[node].layer {
                    zero_rows(weight, 1, &[channel]);
                }
            }
            ChannelUse::LinearInput { node, block } => {
                if let Layer::Linear { weight, .. } = &mut nodes[node].layer {
                    let cols: Vec<usize> = (channel * block..(channel + 1) * block).collect();
                    zero_rows(weight, 1, &cols);
                }
            }
            ChannelUse::Producer { .. } | ChannelUse::Norm { .. } => {}
        }
    }
    Ok(())
}
