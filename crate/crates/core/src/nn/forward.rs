use super::layer::{Layer, Source};
use super::model::Model;
use crate::error::{dim_err, Error, Result};
use crate::par;
use crate::tensor::{conv2d, gemm_nt, Scalar, Tensor};

/// BatchNorm behaviour: batch statistics (`Train`) or running statistics (`Eval`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub(crate) enum NodeAux<T> {
    None,
    BatchNorm {
        mean: Vec<T>,
        /// Biased batch variance (train) or running variance (eval).
        var: Vec<T>,
        inv_std: Vec<T>,
        xhat: Tensor<T>,
    },
    MaxPool {
        argmax: Vec<usize>,
    },
}

/// Everything a backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardRecord<T> {
    pub(crate) model_id: u64,
    pub(crate) version: u64,
    pub mode: Mode,
    pub input: Tensor<T>,
    /// Output of every node, after channel masking.
    pub outputs: Vec<Tensor<T>>,
    pub(crate) aux: Vec<NodeAux<T>>,
    /// ReLU/max-pool decisions that disagreed with a frozen reference record.
    pub gate_flips: usize,
}

impl<T: Scalar> NodeAux<T> {
    fn cast<U: Scalar>(&self) -> NodeAux<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.f64())).collect();
        match self {
            NodeAux::None => NodeAux::None,
            NodeAux::BatchNorm {
                mean,
                var,
                inv_std,
                xhat,
            } => NodeAux::BatchNorm {
                mean: conv(mean),
                var: conv(var),
                inv_std: conv(inv_std),
                xhat: xhat.cast(),
            },
            NodeAux::MaxPool { argmax } => NodeAux::MaxPool {
                argmax: argmax.clone(),
            },
        }
    }
}

impl<T: Scalar> ForwardRecord<T> {
    /// Converts the element type; gating decisions carry over unchanged.
    pub fn cast<U: Scalar>(&self) -> ForwardRecord<U> {
        ForwardRecord {
            model_id: self.model_id,
            version: self.version,
            mode: self.mode,
            input: self.input.cast(),
            outputs: self.outputs.iter().map(|t| t.cast()).collect(),
            aux: self.aux.iter().map(|a| a.cast()).collect(),
            gate_flips: self.gate_flips,
        }
    }

    pub fn logits(&self) -> &Tensor<T> {
        self.outputs.last().expect("records are never empty")
    }

    pub fn value(&self, src: Source) -> &Tensor<T> {
        match src {
            Source::Input => &self.input,
            Source::Node(i) => &self.outputs[i],
        }
    }

    /// Recorded pre-activation at each site, in site order.
    pub fn site_values<'a>(&'a self, model: &Model<T>) -> Vec<&'a Tensor<T>> {
        model.sites().iter().map(|s| &self.outputs[s.node]).collect()
    }
}

/// `(batch, channels, spatial)` view of an `N×C` or `N×C×H×W` tensor.
pub(crate) fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

pub(crate) fn zero_masked_channels<T: Scalar>(t: &mut Tensor<T>, keep: &[bool]) {
    let (n, c, s) = channel_layout(t.shape());
    let data = t.data_mut();
    for b in 0..n {
        for (ch, &k) in keep.iter().enumerate().take(c) {
            if !k {
                data[(b * c + ch) * s..(b * c + ch + 1) * s].fill(T::zero());
            }
        }
    }
}

impl<T: Scalar> Model<T> {
    /// Forward pass that updates BatchNorm running statistics in train mode.
    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, ForwardRecord<T>)> {
        let record = self.forward_pass(input, mode, None)?;
        if mode == Mode::Train {
            self.commit_running_stats(&record);
        }
        Ok((record.logits().clone(), record))
    }

    /// Eval-mode logits.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut rec = self.forward_pass(input, Mode::Eval, None)?;
        Ok(rec.outputs.pop().expect("non-empty"))
    }

    /// Pure forward pass. With `frozen`, every ReLU and max-pool reuses the
    /// gating decisions of that record instead of its own, which makes the
    /// network a smooth function of its parameters around the frozen point.
    pub fn forward_pass(
        &self,
        input: &Tensor<T>,
        mode: Mode,
        frozen: Option<&ForwardRecord<T>>,
    ) -> Result<ForwardRecord<T>> {
        self.forward_impl(input, mode, frozen, None)
    }

    /// Like [`Model::forward_pass`] with `base` as the frozen record, but
    /// reuses `base`'s outputs for nodes before `start` (their parameters
    /// must be unchanged since `base` was recorded).
    pub(crate) fn forward_resume(
        &self,
        base: &ForwardRecord<T>,
        start: usize,
    ) -> Result<ForwardRecord<T>> {
        self.forward_impl(&base.input, base.mode, Some(base), Some(start))
    }

    fn forward_impl(
        &self,
        input: &Tensor<T>,
        mode: Mode,
        frozen: Option<&ForwardRecord<T>>,
        start: Option<usize>,
    ) -> Result<ForwardRecord<T>> {
        if input.rank() == 0 || input.shape()[1..] != self.input_shape()[..] {
            return Err(dim_err!(
                "model input must be N×{:?}, got {:?}",
                self.input_shape(),
                input.shape()
            ));
        }
        if let Some(f) = frozen {
            if f.input.shape() != input.shape() || f.outputs.len() != self.nodes().len() {
                return Err(Error::State("frozen record does not match this pass".into()));
            }
        }
        let masks = self.node_masks();
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.nodes().len());
        let mut aux = Vec::with_capacity(self.nodes().len());
        let mut gate_flips = 0;
        let start = start.unwrap_or(0);
        if let Some(base) = frozen.filter(|_| start > 0) {
            outputs.extend_from_slice(&base.outputs[..start]);
            aux.extend_from_slice(&base.aux[..start]);
        }
        for (i, node) in self.nodes().iter().enumerate().skip(start) {
            let get = |s: Source| match s {
                Source::Input => input,
                Source::Node(j) => &outputs[j],
            };
            let x = get(node.inputs[0]);
            let frozen_in = frozen.map(|f| f.value(node.inputs[0]));
            let (mut y, a) = forward_node(&node.layer, x, node.inputs.get(1).map(|&s| get(s)), mode, frozen_in, frozen.map(|f| &f.aux[i]), &mut gate_flips)
                .map_err(|e| match e {
                    Error::Dimension(m) | Error::Shape(m) => {
                        dim_err!("node {i} ({}): {m}", node.layer.kind().name())
                    }
                    other => other,
                })?;
            if let Some(keep) = &masks[i] {
                zero_masked_channels(&mut y, keep);
            }
            outputs.push(y);
            aux.push(a);
        }
        Ok(ForwardRecord {
            model_id: self.id(),
            version: self.version(),
            mode,
            input: input.clone(),
            outputs,
            aux,
            gate_flips,
        })
    }

    fn commit_running_stats(&mut self, record: &ForwardRecord<T>) {
        // running statistics do not affect train-mode gradients, so the record stays valid
        for (i, node) in self.nodes_untracked().iter_mut().enumerate() {
            if let (
                Layer::BatchNorm {
                    running_mean,
                    running_var,
                    momentum,
                    ..
                },
                NodeAux::BatchNorm { mean, var, .. },
            ) = (&mut node.layer, &record.aux[i])
            {
                let (n, _, s) = channel_layout(record.outputs[i].shape());
                let m = n * s;
                let unbias = if m > 1 {
                    T::of(m as f64 / (m - 1) as f64)
                } else {
                    T::one()
                };
                let keep = T::one() - *momentum;
                for c in 0..mean.len() {
                    let rm = &mut running_mean.data_mut()[c];
                    *rm = keep * *rm + *momentum * mean[c];
                    let rv = &mut running_var.data_mut()[c];
                    *rv = keep * *rv + *momentum * var[c] * unbias;
                }
            }
        }
    }
}

fn forward_node<T: Scalar>(
    layer: &Layer<T>,
    x: &Tensor<T>,
    second: Option<&Tensor<T>>,
    mode: Mode,
    frozen_in: Option<&Tensor<T>>,
    frozen_aux: Option<&NodeAux<T>>,
    flips: &mut usize,
) -> Result<(Tensor<T>, NodeAux<T>)> {
    let out = match layer {
        Layer::Conv2d {
            weight,
            bias,
            stride,
            padding,
        } => {
            let mut y = conv2d(x, weight, *stride, *padding)?;
            if let Some(b) = bias {
                let (n, f, s) = channel_layout(y.shape());
                let d = y.data_mut();
                for bn in 0..n {
                    for ch in 0..f {
                        let bv = b.data()[ch];
                        for v in &mut d[(bn * f + ch) * s..(bn * f + ch + 1) * s] {
                            *v += bv;
                        }
                    }
                }
            }
            y
        }
        Layer::Linear { weight, bias } => {
            let (n, k) = x.dims2()?;
            let (out, wk) = weight.dims2()?;
            if k != wk {
                return Err(dim_err!("linear expects {wk} features, got {:?}", x.shape()));
            }
            let mut y = vec![T::zero(); n * out];
            let (xd, wd) = (x.data(), weight.data());
            par::for_each_chunk_mut(&mut y, out, |r, row| {
                gemm_nt(1, k, out, &xd[r * k..(r + 1) * k], wd, row);
                if let Some(b) = bias {
                    for (v, &bv) in row.iter_mut().zip(b.data()) {
                        *v += bv;
                    }
                }
            });
            Tensor::new(&[n, out], y)?
        }
        Layer::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            eps,
            ..
        } => return batch_norm_forward(x, gamma, beta, running_mean, running_var, *eps, mode),
        Layer::ReLU => match frozen_in {
            None => x.relu(),
            Some(g) => {
                let mut y = x.clone();
                for (v, &gv) in y.data_mut().iter_mut().zip(g.data()) {
                    let open = gv > T::zero();
                    if open != (*v > T::zero()) {
                        *flips += 1;
                    }
                    if !open {
                        *v = T::zero();
                    }
                }
                y
            }
        },
        Layer::MaxPool { kernel } => {
            let frozen_argmax = match frozen_aux {
                Some(NodeAux::MaxPool { argmax }) => Some(argmax.as_slice()),
                _ => None,
            };
            return max_pool_forward(x, *kernel, frozen_argmax, flips);
        }
        Layer::AvgPool { kernel } => avg_pool_forward(x, *kernel)?,
        Layer::ResidualAdd => {
            let b = second.ok_or_else(|| dim_err!("residual add needs two operands"))?;
            x.add(b)?
        }
        Layer::Flatten => {
            let n = x.batch();
            x.clone().reshape(&[n, x.item_len()])?
        }
    };
    Ok((out, NodeAux::None))
}

fn batch_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
    mode: Mode,
) -> Result<(Tensor<T>, NodeAux<T>)> {
    if x.rank() != 2 && x.rank() != 4 || x.shape()[1] != gamma.len() {
        return Err(dim_err!(
            "batchnorm over {} channels got shape {:?}",
            gamma.len(),
            x.shape()
        ));
    }
    let (n, c, s) = channel_layout(x.shape());
    let xd = x.data();
    let (mean, var) = match mode {
        Mode::Eval => (running_mean.data().to_vec(), running_var.data().to_vec()),
        Mode::Train => {
            let m = T::of((n * s) as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut acc = T::zero();
                for b in 0..n {
                    for &v in &xd[(b * c + ch) * s..(b * c + ch + 1) * s] {
                        acc += v;
                    }
                }
                let mu = acc / m;
                let mut sq = T::zero();
                for b in 0..n {
                    for &v in &xd[(b * c + ch) * s..(b * c + ch + 1) * s] {
                        sq += (v - mu) * (v - mu);
                    }
                }
                mean[ch] = mu;
                var[ch] = sq / m;
            }
            (mean, var)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut y = vec![T::zero(); xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let (g, be) = (gamma.data()[ch], beta.data()[ch]);
            let range = (b * c + ch) * s..(b * c + ch + 1) * s;
            for k in range {
                let h = (xd[k] - mean[ch]) * inv_std[ch];
                xhat[k] = h;
                y[k] = g * h + be;
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), y)?,
        NodeAux::BatchNorm {
            mean,
            var,
            inv_std,
            xhat: Tensor::new(x.shape(), xhat)?,
        },
    ))
}

fn pool_dims<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(dim_err!("pool {k} cannot tile shape {:?}", x.shape()));
    }
    Ok((n, c, h, w, h / k, w / k))
}

fn max_pool_forward<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    frozen: Option<&[usize]>,
    flips: &mut usize,
) -> Result<(Tensor<T>, NodeAux<T>)> {
    let (n, c, h, w, oh, ow) = pool_dims(x, k)?;
    let xd = x.data();
    let mut y = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * k * w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = base + (oy * k + dy) * w + ox * k + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                let chosen = match frozen {
                    Some(f) => {
                        let fi = f[y.len()];
                        if fi != best {
                            *flips += 1;
                        }
                        fi
                    }
                    None => best,
                };
                y.push(xd[chosen]);
                argmax.push(chosen);
            }
        }
    }
    Ok((
        Tensor::new(&[n, c, oh, ow], y)?,
        NodeAux::MaxPool { argmax },
    ))
}

fn avg_pool_forward<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (n, c, h, w, oh, ow) = pool_dims(x, k)?;
    let xd = x.data();
    let scale = T::one() / T::of((k * k) as f64);
    let mut y = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for dy in 0..k {
                    for dx in 0..k {
                        acc += xd[base + (oy * k + dy) * w + ox * k + dx];
                    }
                }
                y.push(acc * scale);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], y)
}
