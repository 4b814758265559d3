use super::forward::{channel_layout, zero_masked_channels, ForwardRecord, Mode, NodeAux};
use super::layer::{Layer, Source};
use super::model::Model;
use crate::error::{dim_err, Error, Result};
use crate::tensor::{conv2d_backward_parts, gemm_nn, gemm_tn, Scalar, Tensor};

/// Result of a reverse pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    /// Gradient with respect to every node's output (after masking).
    pub node_grads: Vec<Tensor<T>>,
    /// Gradient with respect to the model input.
    pub input_grad: Tensor<T>,
    /// Per-node parameter gradients in [`Layer::params`] order; empty when
    /// parameter gradients were not requested.
    pub param_grads: Vec<Vec<Tensor<T>>>,
}

/// δx at every site, plus the full per-node gradients they were taken from.
#[derive(Debug, Clone)]
pub struct SiteGradients<T> {
    pub sites: Vec<Tensor<T>>,
    pub node_grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn site_grads(&self, model: &Model<T>) -> Vec<Tensor<T>> {
        model
            .sites()
            .iter()
            .map(|s| self.node_grads[s.node].clone())
            .collect()
    }
}

#[cfg(test)]
thread_local! {
    /// Mutation hook for tests: flips the sign of this node's weight gradient.
    pub(crate) static FLIP_WEIGHT_GRAD: std::cell::Cell<Option<usize>> = const { std::cell::Cell::new(None) };
}

impl<T: Scalar> Model<T> {
    /// Reverse pass that accumulates parameter gradients into the nodes and
    /// returns δx at every site. `output_grad` may be any tensor of the logits'
    /// shape; it does not have to come from a loss.
    pub fn backward(
        &mut self,
        record: &ForwardRecord<T>,
        output_grad: &Tensor<T>,
    ) -> Result<SiteGradients<T>> {
        let grads = self.backward_pass(record, output_grad, true)?;
        for (node, pg) in self.nodes_untracked().iter_mut().zip(&grads.param_grads) {
            for (acc, g) in node.grads.iter_mut().zip(pg) {
                acc.add_assign(g)?;
            }
        }
        Ok(SiteGradients {
            sites: grads.site_grads(self),
            node_grads: grads.node_grads,
        })
    }

    /// Pure reverse pass. Node outputs are visited in reverse order and
    /// gradients flowing into a shared operand are summed in that order.
    pub fn backward_pass(
        &self,
        record: &ForwardRecord<T>,
        output_grad: &Tensor<T>,
        want_params: bool,
    ) -> Result<Gradients<T>> {
        if record.model_id != self.id() || record.version != self.version() {
            return Err(Error::State(
                "forward record is stale or belongs to another model".into(),
            ));
        }
        if record.outputs.len() != self.nodes().len() {
            return Err(Error::State("forward record is incomplete".into()));
        }
        if output_grad.shape() != record.logits().shape() {
            return Err(dim_err!(
                "output gradient {:?} does not match logits {:?}",
                output_grad.shape(),
                record.logits().shape()
            ));
        }
        let masks = self.node_masks();
        let count = self.nodes().len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; count];
        grads[count - 1] = Some(output_grad.clone());
        let mut input_grad: Option<Tensor<T>> = None;
        let mut param_grads = vec![Vec::new(); if want_params { count } else { 0 }];
        let mut node_grads = vec![None; count];

        for i in (0..count).rev() {
            let node = &self.nodes()[i];
            let mut g = grads[i]
                .take()
                .unwrap_or_else(|| Tensor::zeros(record.outputs[i].shape()));
            if let Some(keep) = &masks[i] {
                zero_masked_channels(&mut g, keep);
            }
            let x = record.value(node.inputs[0]);
            let (input_grads, pg) =
                backward_node(&node.layer, x, &record.aux[i], &g, record.mode, want_params)
                    .map_err(|e| match e {
                        Error::Dimension(m) => dim_err!("node {i}: {m}"),
                        other => other,
                    })?;
            #[cfg(test)]
            let pg = {
                let mut pg = pg;
                if FLIP_WEIGHT_GRAD.with(|f| f.get()) == Some(i) {
                    if let Some(w) = pg.first_mut() {
                        *w = w.scale(-T::one());
                    }
                }
                pg
            };
            for (src, gi) in node.inputs.iter().zip(input_grads) {
                let slot = match src {
                    Source::Input => &mut input_grad,
                    Source::Node(j) => &mut grads[*j],
                };
                match slot {
                    Some(acc) => acc.add_assign(&gi)?,
                    None => *slot = Some(gi),
                }
            }
            if want_params {
                param_grads[i] = pg;
            }
            node_grads[i] = Some(g);
        }
        Ok(Gradients {
            node_grads: node_grads.into_iter().map(|g| g.expect("visited")).collect(),
            input_grad: input_grad.unwrap_or_else(|| Tensor::zeros(record.input.shape())),
            param_grads,
        })
    }
}

/// Operand gradients and parameter gradients of one node.
type NodeGrads<T> = (Vec<Tensor<T>>, Vec<Tensor<T>>);

/// Returns gradients for each operand and (if requested) each parameter.
fn backward_node<T: Scalar>(
    layer: &Layer<T>,
    x: &Tensor<T>,
    aux: &NodeAux<T>,
    g: &Tensor<T>,
    mode: Mode,
    want_params: bool,
) -> Result<NodeGrads<T>> {
    Ok(match layer {
        Layer::Conv2d {
            weight,
            bias,
            stride,
            padding,
        } => {
            let (gx, gw) = conv2d_backward_parts(x, weight, g, *stride, *padding, true)?;
            let mut pg = Vec::new();
            if want_params {
                pg.push(gw);
                if bias.is_some() {
                    pg.push(channel_sums(g));
                }
            }
            (vec![gx.expect("requested")], pg)
        }
        Layer::Linear { weight, bias } => {
            let (n, k) = x.dims2()?;
            let (out, _) = weight.dims2()?;
            let mut gx = vec![T::zero(); n * k];
            gemm_nn(n, out, k, g.data(), weight.data(), &mut gx);
            let mut pg = Vec::new();
            if want_params {
                let mut gw = vec![T::zero(); out * k];
                gemm_tn(out, n, k, g.data(), x.data(), &mut gw);
                pg.push(Tensor::new(weight.shape(), gw)?);
                if bias.is_some() {
                    pg.push(channel_sums(g));
                }
            }
            (vec![Tensor::new(x.shape(), gx)?], pg)
        }
        Layer::BatchNorm { gamma, .. } => {
            let NodeAux::BatchNorm { inv_std, xhat, .. } = aux else {
                return Err(Error::State("batchnorm record missing statistics".into()));
            };
            let (n, c, s) = channel_layout(x.shape());
            let (gd, hd) = (g.data(), xhat.data());
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let r = (b * c + ch) * s..(b * c + ch + 1) * s;
                    for k in r {
                        dbeta[ch] += gd[k];
                        dgamma[ch] += gd[k] * hd[k];
                    }
                }
            }
            let mut gx = vec![T::zero(); gd.len()];
            let m = T::of((n * s) as f64);
            for b in 0..n {
                for ch in 0..c {
                    let scale = gamma.data()[ch] * inv_std[ch];
                    let r = (b * c + ch) * s..(b * c + ch + 1) * s;
                    for k in r {
                        gx[k] = match mode {
                            Mode::Eval => gd[k] * scale,
                            Mode::Train => {
                                scale / m * (m * gd[k] - dbeta[ch] - hd[k] * dgamma[ch])
                            }
                        };
                    }
                }
            }
            let pg = if want_params {
                vec![
                    Tensor::new(&[c], dgamma)?,
                    Tensor::new(&[c], dbeta)?,
                ]
            } else {
                Vec::new()
            };
            (vec![Tensor::new(x.shape(), gx)?], pg)
        }
        Layer::ReLU => (vec![x.relu_mask(g)?], Vec::new()),
        Layer::MaxPool { .. } => {
            let NodeAux::MaxPool { argmax } = aux else {
                return Err(Error::State("max-pool record missing argmax".into()));
            };
            let mut gx = vec![T::zero(); x.len()];
            for (&src, &gv) in argmax.iter().zip(g.data()) {
                gx[src] += gv;
            }
            (vec![Tensor::new(x.shape(), gx)?], Vec::new())
        }
        Layer::AvgPool { kernel } => {
            let (n, c, h, w) = x.dims4()?;
            let (oh, ow) = (h / kernel, w / kernel);
            let scale = T::one() / T::of((kernel * kernel) as f64);
            let gd = g.data();
            let mut gx = vec![T::zero(); x.len()];
            for plane in 0..n * c {
                for yy in 0..h {
                    for xx in 0..w {
                        gx[(plane * h + yy) * w + xx] =
                            gd[(plane * oh + yy / kernel) * ow + xx / kernel] * scale;
                    }
                }
            }
            (vec![Tensor::new(x.shape(), gx)?], Vec::new())
        }
        Layer::ResidualAdd => (vec![g.clone(), g.clone()], Vec::new()),
        Layer::Flatten => (vec![g.clone().reshape(x.shape())?], Vec::new()),
    })
}

/// Sum over every axis except the channel axis, ascending.
fn channel_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let (n, c, s) = channel_layout(g.shape());
    let gd = g.data();
    let mut out = vec![T::zero(); c];
    for b in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            for &v in &gd[(b * c + ch) * s..(b * c + ch + 1) * s] {
                *o += v;
            }
        }
    }
    Tensor::new(&[c], out).expect("channel count is positive")
}
