use crate::error::{dim_err, Error, Result};
use crate::nn::{ForwardRecord, Gradients, Layer, Model, NodeAux, SiteKind};
use crate::tensor::{conv2d_weight_grad_per_example, Scalar, Tensor};

/// Which per-example quantity an estimator squares, takes the absolute
/// value of, or averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SignalKind {
    /// `Σ x·δx` over the spatial positions of a channel at the site.
    Gate,
    /// `γ·δγ(n) + β·δβ(n)` at the BatchNorm attached to the site.
    BatchNorm,
    /// `Σ w·δw(n) + b·δb(n)` over the weights producing the channel.
    Group,
}

/// Per-example signals for one batch. `per_site[s]` is `examples × C`
/// row-major, or empty for probe sites under non-gate kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct Signals {
    pub kind: SignalKind,
    pub examples: usize,
    pub per_site: Vec<Vec<f64>>,
}

/// `s[n,c] = Σ x·δx` over every non-batch, non-channel position, summed in
/// f64 in ascending position order.
pub fn channel_signal<T: Scalar>(x: &Tensor<T>, dx: &Tensor<T>) -> Result<Vec<f64>> {
    x.check_same_shape(dx, "channel_signal")?;
    if x.rank() < 2 {
        return Err(dim_err!(
            "channel_signal needs N×C or N×C×… tensors, got {:?}",
            x.shape()
        ));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let s = x.len() / (n * c);
    Ok(x.data()
        .chunks(s)
        .zip(dx.data().chunks(s))
        .map(|(xs, ds)| xs.iter().zip(ds).map(|(a, b)| a.f64() * b.f64()).sum())
        .collect())
}

/// `g[n,c] = γ_c·δγ_c(n) + β_c·δβ_c(n)` from per-example parameter
/// gradients laid out `n × C`.
pub fn bn_gate_terms(gamma: &[f64], beta: &[f64], dgamma: &[f64], dbeta: &[f64]) -> Result<Vec<f64>> {
    let c = gamma.len();
    if beta.len() != c || c == 0 || !dgamma.len().is_multiple_of(c) || dbeta.len() != dgamma.len() {
        return Err(dim_err!(
            "bn_gate_terms: γ {}, β {}, δγ {}, δβ {}",
            c,
            beta.len(),
            dgamma.len(),
            dbeta.len()
        ));
    }
    Ok(dgamma
        .iter()
        .zip(dbeta)
        .enumerate()
        .map(|(i, (dg, db))| gamma[i % c] * dg + beta[i % c] * db)
        .collect())
}

/// `g[n,c] = Σ_j W[c,j]·δW_n[c,j] + b_c·δb_c(n)`. `weight` is `C × k`,
/// `dweight` is `n × C × k`, `dbias` is `n × C`.
pub fn group_terms(
    weight: &[f64],
    bias: Option<&[f64]>,
    dweight: &[f64],
    dbias: Option<&[f64]>,
    channels: usize,
) -> Result<Vec<f64>> {
    let bad = channels == 0
        || !weight.len().is_multiple_of(channels)
        || weight.is_empty()
        || !dweight.len().is_multiple_of(weight.len())
        || bias.is_some() != dbias.is_some();
    if bad {
        return Err(dim_err!(
            "group_terms: weight {}, δweight {}, channels {channels}",
            weight.len(),
            dweight.len()
        ));
    }
    let k = weight.len() / channels;
    let n = dweight.len() / weight.len();
    if let (Some(b), Some(db)) = (bias, dbias) {
        if b.len() != channels || db.len() != n * channels {
            return Err(dim_err!("group_terms: bias {} / δbias {}", b.len(), db.len()));
        }
    }
    let mut out = Vec::with_capacity(n * channels);
    for e in 0..n {
        for c in 0..channels {
            let w = &weight[c * k..(c + 1) * k];
            let dw = &dweight[(e * channels + c) * k..(e * channels + c + 1) * k];
            let mut g: f64 = w.iter().zip(dw).map(|(a, b)| a * b).sum();
            if let (Some(b), Some(db)) = (bias, dbias) {
                g += b[c] * db[e * channels + c];
            }
            out.push(g);
        }
    }
    Ok(out)
}

fn f64s<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.to_f64_vec()
}

/// Per-(example, channel) sums of a channel-major tensor.
fn channel_sums<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    let (n, c) = (t.shape()[0], t.shape()[1]);
    let s = t.len() / (n * c);
    t.data().chunks(s).map(|ch| ch.iter().map(|v| v.f64()).sum()).collect()
}

fn bn_signal<T: Scalar>(
    model: &Model<T>,
    record: &ForwardRecord<T>,
    grads: &Gradients<T>,
    site_id: usize,
    bn: Option<usize>,
) -> Result<Vec<f64>> {
    let bn = bn.ok_or_else(|| {
        Error::Input(format!("site {site_id} has no BatchNorm for molchanov_bn"))
    })?;
    let Layer::BatchNorm { gamma, beta, .. } = &model.nodes()[bn].layer else {
        return Err(Error::Input(format!("node {bn} is not a BatchNorm")));
    };
    let NodeAux::BatchNorm { xhat, .. } = &record.aux[bn] else {
        return Err(Error::State(format!("node {bn} has no normalisation record")));
    };
    let dy = &grads.node_grads[bn];
    let dgamma = channel_signal(xhat, dy)?;
    let dbeta = channel_sums(dy);
    bn_gate_terms(&f64s(gamma), &f64s(beta), &dgamma, &dbeta)
}

fn group_signal<T: Scalar>(
    model: &Model<T>,
    record: &ForwardRecord<T>,
    grads: &Gradients<T>,
    node_index: usize,
) -> Result<Vec<f64>> {
    let node = &model.nodes()[node_index];
    let x = record.value(node.inputs[0]);
    let dy = &grads.node_grads[node_index];
    let n = dy.shape()[0];
    let (weight, bias, dweight) = match &node.layer {
        Layer::Conv2d {
            weight,
            bias,
            stride,
            padding,
        } => {
            let per = conv2d_weight_grad_per_example(x, weight, dy, *stride, *padding)?;
            let flat: Vec<f64> = per.iter().flat_map(|t| t.data().iter().map(|v| v.f64())).collect();
            (weight, bias, flat)
        }
        Layer::Linear { weight, bias } => {
            let (out, inp) = weight.dims2()?;
            let (xd, gd) = (x.data(), dy.data());
            let mut flat = Vec::with_capacity(n * out * inp);
            for e in 0..n {
                for c in 0..out {
                    let g = gd[e * out + c].f64();
                    flat.extend(xd[e * inp..(e + 1) * inp].iter().map(|v| g * v.f64()));
                }
            }
            (weight, bias, flat)
        }
        other => {
            return Err(Error::Input(format!(
                "molchanov_group needs a weighted node, node {node_index} is {}",
                other.kind().name()
            )))
        }
    };
    let channels = weight.shape()[0];
    let dbias = bias.as_ref().map(|_| channel_sums(dy));
    let bias = bias.as_ref().map(f64s);
    group_terms(&f64s(weight), bias.as_deref(), &dweight, dbias.as_deref(), channels)
}

/// Signals of one kind for every site, from a forward record and the
/// matching reverse pass.
pub fn site_signals<T: Scalar>(
    model: &Model<T>,
    record: &ForwardRecord<T>,
    grads: &Gradients<T>,
    kind: SignalKind,
) -> Result<Signals> {
    let examples = record.input.batch();
    let per_site = model
        .sites()
        .iter()
        .map(|site| match (kind, site.kind) {
            (SignalKind::Gate, _) => channel_signal(
                &record.outputs[site.node],
                &grads.node_grads[site.node],
            ),
            (_, SiteKind::Probe) => Ok(Vec::new()),
            (SignalKind::BatchNorm, SiteKind::Prunable) => {
                bn_signal(model, record, grads, site.id, site.bn)
            }
            (SignalKind::Group, SiteKind::Prunable) => group_signal(model, record, grads, site.node),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Signals {
        kind,
        examples,
        per_site,
    })
}
