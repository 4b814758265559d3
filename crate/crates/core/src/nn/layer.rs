use crate::error::{dim_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Where a node reads one of its operands from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    /// The model input batch.
    Input,
    /// Output of the node with this index.
    Node(usize),
}

/// A layer and its parameters.
///
/// Trainable parameters are exposed in a fixed order by [`Layer::params`]:
/// `[weight, bias?]` for Conv2d/Linear, `[gamma, beta]` for BatchNorm.
/// BatchNorm running statistics are buffers, not parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv2d {
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        stride: usize,
        padding: usize,
    },
    /// `y = x·Wᵀ + b` with `W` stored `out × in`.
    Linear {
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
    },
    BatchNorm {
        gamma: Tensor<T>,
        beta: Tensor<T>,
        running_mean: Tensor<T>,
        running_var: Tensor<T>,
        eps: T,
        momentum: T,
    },
    ReLU,
    AvgPool {
        kernel: usize,
    },
    MaxPool {
        kernel: usize,
    },
    ResidualAdd,
    Flatten,
}

/// Parameter-free tag for a [`Layer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    Linear,
    BatchNorm,
    ReLU,
    AvgPool,
    MaxPool,
    ResidualAdd,
    Flatten,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::Linear => "linear",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::ReLU => "relu",
            LayerKind::AvgPool => "avgpool",
            LayerKind::MaxPool => "maxpool",
            LayerKind::ResidualAdd => "add",
            LayerKind::Flatten => "flatten",
        }
    }

    pub fn from_name(name: &str) -> Option<LayerKind> {
        Some(match name {
            "conv2d" => LayerKind::Conv2d,
            "linear" => LayerKind::Linear,
            "batchnorm" => LayerKind::BatchNorm,
            "relu" => LayerKind::ReLU,
            "avgpool" => LayerKind::AvgPool,
            "maxpool" => LayerKind::MaxPool,
            "add" => LayerKind::ResidualAdd,
            "flatten" => LayerKind::Flatten,
            _ => return None,
        })
    }
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d { .. } => LayerKind::Conv2d,
            Layer::Linear { .. } => LayerKind::Linear,
            Layer::BatchNorm { .. } => LayerKind::BatchNorm,
            Layer::ReLU => LayerKind::ReLU,
            Layer::AvgPool { .. } => LayerKind::AvgPool,
            Layer::MaxPool { .. } => LayerKind::MaxPool,
            Layer::ResidualAdd => LayerKind::ResidualAdd,
            Layer::Flatten => LayerKind::Flatten,
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Conv2d { weight, bias, .. } | Layer::Linear { weight, bias } => {
                std::iter::once(weight).chain(bias.as_ref()).collect()
            }
            Layer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Conv2d { weight, bias, .. } | Layer::Linear { weight, bias } => {
                std::iter::once(weight).chain(bias.as_mut()).collect()
            }
            Layer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => Vec::new(),
        }
    }

    /// Parameters followed by buffers, in checkpoint order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut all = self.params();
        if let Layer::BatchNorm {
            running_mean,
            running_var,
            ..
        } = self
        {
            all.push(running_mean);
            all.push(running_var);
        }
        all
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                ..
            } => vec![gamma, beta, running_mean, running_var],
            other => other.params_mut(),
        }
    }

    /// Number of output channels for channel-producing layers.
    pub fn out_channels(&self) -> Option<usize> {
        match self {
            Layer::Conv2d { weight, .. } | Layer::Linear { weight, .. } => Some(weight.shape()[0]),
            Layer::BatchNorm { gamma, .. } => Some(gamma.len()),
            _ => None,
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Layer::ResidualAdd => 2,
            _ => 1,
        }
    }

    /// Output shape (excluding batch) for the given input shapes (excluding batch).
    pub fn output_shape(&self, inputs: &[Vec<usize>]) -> Result<Vec<usize>> {
        let first = inputs
            .first()
            .ok_or_else(|| dim_err!("{} has no input", self.kind().name()))?;
        match self {
            Layer::Conv2d {
                weight,
                stride,
                padding,
                ..
            } => {
                let mut s = vec![1];
                s.extend_from_slice(first);
                let g = crate::tensor::ConvGeometry::new(&s, weight.shape(), *stride, *padding)?;
                Ok(g.output_shape()[1..].to_vec())
            }
            Layer::Linear { weight, .. } => match first[..] {
                [f] if f == weight.shape()[1] => Ok(vec![weight.shape()[0]]),
                _ => Err(dim_err!(
                    "linear expects {} features, got shape {first:?}",
                    weight.shape()[1]
                )),
            },
            Layer::BatchNorm { gamma, .. } => {
                if first.first() != Some(&gamma.len()) || !(first.len() == 1 || first.len() == 3) {
                    return Err(dim_err!(
                        "batchnorm over {} channels got shape {first:?}",
                        gamma.len()
                    ));
                }
                Ok(first.clone())
            }
            Layer::ReLU => Ok(first.clone()),
            Layer::AvgPool { kernel } | Layer::MaxPool { kernel } => match first[..] {
                [c, h, w] if *kernel > 0 && h % kernel == 0 && w % kernel == 0 => {
                    Ok(vec![c, h / kernel, w / kernel])
                }
                _ => Err(dim_err!("pool {kernel} cannot tile shape {first:?}")),
            },
            Layer::ResidualAdd => {
                if inputs.len() != 2 || inputs[0] != inputs[1] {
                    return Err(dim_err!("residual add operands differ: {inputs:?}"));
                }
                Ok(first.clone())
            }
            Layer::Flatten => Ok(vec![first.iter().product()]),
        }
    }
}

/// One vertex of the model graph.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode<T> {
    pub layer: Layer<T>,
    pub inputs: Vec<Source>,
    /// Whether this Conv2d/Linear node's output channels may be pruned.
    pub prunable: bool,
    /// Accumulated gradients, same shapes as [`Layer::params`].
    pub grads: Vec<Tensor<T>>,
}

impl<T: Scalar> LayerNode<T> {
    pub fn new(layer: Layer<T>, inputs: Vec<Source>, prunable: bool) -> Self {
        let grads = layer.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        LayerNode {
            layer,
            inputs,
            prunable,
            grads,
        }
    }

    pub fn zero_grads(&mut self) {
        self.grads = self
            .layer
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
    }

    pub fn param_count(&self) -> usize {
        self.layer.params().iter().map(|p| p.len()).sum()
    }
}
