use std::sync::atomic::{AtomicU64, Ordering};

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layer::{Layer, LayerKind, LayerNode, Source};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteKind {
    /// A Conv2d/Linear output whose channels can be pruned.
    Prunable,
    /// An observation point used only for measuring signals (never pruned).
    Probe,
}

/// A channel-bearing location whose per-channel signals are recorded.
///
/// For prunable sites `node` is a Conv2d/Linear node and the recorded value is
/// its output before any BatchNorm or nonlinearity. `bn` is the BatchNorm node
/// that directly consumes it, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Site {
    pub id: usize,
    pub node: usize,
    pub channels: usize,
    pub bn: Option<usize>,
    pub kind: SiteKind,
    /// Channel mask; `false` entries are pruned.
    pub keep: Vec<bool>,
}

impl Site {
    pub fn pruned_count(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }
}

/// A topologically ordered layer graph. The last node produces the logits.
#[derive(Debug, PartialEq)]
pub struct Model<T> {
    nodes: Vec<LayerNode<T>>,
    sites: Vec<Site>,
    input_shape: Vec<usize>,
    num_classes: usize,
    id: u64,
    version: u64,
}

impl<T: Scalar> Clone for Model<T> {
    fn clone(&self) -> Self {
        Model {
            nodes: self.nodes.clone(),
            sites: self.sites.clone(),
            input_shape: self.input_shape.clone(),
            num_classes: self.num_classes,
            id: fresh_id(),
            version: 0,
        }
    }
}

impl<T: Scalar> Model<T> {
    /// Assembles and validates a model. Sites are derived from the `prunable`
    /// flags, in node order.
    pub fn from_nodes(
        nodes: Vec<LayerNode<T>>,
        input_shape: &[usize],
        num_classes: usize,
    ) -> Result<Self> {
        let mut model = Model {
            nodes,
            sites: Vec::new(),
            input_shape: input_shape.to_vec(),
            num_classes,
            id: fresh_id(),
            version: 0,
        };
        model.validate()?;
        model.sites = model.derive_sites();
        Ok(model)
    }

    fn derive_sites(&self) -> Vec<Site> {
        let consumers = self.consumers();
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.prunable)
            .enumerate()
            .map(|(id, (i, n))| {
                let bn = match consumers[i][..] {
                    [c] if self.nodes[c].layer.kind() == LayerKind::BatchNorm => Some(c),
                    _ => None,
                };
                let channels = n.layer.out_channels().unwrap_or(0);
                Site {
                    id,
                    node: i,
                    channels,
                    bn,
                    kind: SiteKind::Prunable,
                    keep: vec![true; channels],
                }
            })
            .collect()
    }

    /// Checks graph ordering, operand shapes and layer invariants.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Input("model has no nodes".into()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.inputs.len() != node.layer.arity() {
                return Err(dim_err!(
                    "node {i} ({}) needs {} inputs, has {}",
                    node.layer.kind().name(),
                    node.layer.arity(),
                    node.inputs.len()
                ));
            }
            for src in &node.inputs {
                if let Source::Node(j) = src {
                    if *j >= i {
                        return Err(Error::Input(format!(
                            "node {i} reads node {j}, which does not precede it"
                        )));
                    }
                }
            }
            let kind = node.layer.kind();
            if node.prunable && !matches!(kind, LayerKind::Conv2d | LayerKind::Linear) {
                return Err(Error::Input(format!(
                    "node {i} ({}) cannot be prunable",
                    kind.name()
                )));
            }
            if let Layer::BatchNorm {
                running_var, eps, ..
            } = &node.layer
            {
                if *eps <= T::zero() || running_var.data().iter().any(|&v| v <= T::zero()) {
                    return Err(Error::Input(format!(
                        "node {i}: batchnorm needs eps > 0 and running variance > 0"
                    )));
                }
            }
            let params = node.layer.params();
            if params.len() != node.grads.len()
                || params
                    .iter()
                    .zip(&node.grads)
                    .any(|(p, g)| p.shape() != g.shape())
            {
                return Err(dim_err!("node {i}: gradient shapes do not match parameters"));
            }
        }
        if self.nodes.last().is_some_and(|n| n.prunable) {
            return Err(Error::Input("the classifier output cannot be prunable".into()));
        }
        let shapes = self.node_shapes()?;
        if shapes.last().map(|s| &s[..]) != Some(&[self.num_classes][..]) {
            return Err(dim_err!(
                "model output shape {:?} does not match {} classes",
                shapes.last(),
                self.num_classes
            ));
        }
        Ok(())
    }

    /// Per-node output shapes, excluding the batch axis.
    pub fn node_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let ins: Vec<Vec<usize>> = node
                .inputs
                .iter()
                .map(|s| match s {
                    Source::Input => self.input_shape.clone(),
                    Source::Node(j) => shapes[*j].clone(),
                })
                .collect();
            let out = node
                .layer
                .output_shape(&ins)
                .map_err(|e| dim_err!("node {i} ({}): {e}", node.layer.kind().name()))?;
            shapes.push(out);
        }
        Ok(shapes)
    }

    /// For each node, the indices of nodes that read its output.
    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            for src in &node.inputs {
                if let Source::Node(j) = src {
                    out[*j].push(i);
                }
            }
        }
        out
    }

    pub fn nodes(&self) -> &[LayerNode<T>] {
        &self.nodes
    }

    /// Mutable access to the nodes. Invalidates outstanding forward records.
    pub fn nodes_mut(&mut self) -> &mut [LayerNode<T>] {
        self.version += 1;
        &mut self.nodes
    }

    pub(crate) fn nodes_untracked(&mut self) -> &mut [LayerNode<T>] {
        &mut self.nodes
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Total prunable channels N.
    pub fn prunable_channels(&self) -> usize {
        self.prunable_sites().map(|s| s.channels).sum()
    }

    pub fn prunable_sites(&self) -> impl Iterator<Item = &Site> {
        self.sites.iter().filter(|s| s.kind == SiteKind::Prunable)
    }

    pub fn param_count(&self) -> usize {
        self.nodes.iter().map(|n| n.param_count()).sum()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.zero_grads();
        }
    }

    /// Adds a probe site observing the output of `node`. Used for measuring
    /// signals at locations other than the prunable conv/linear outputs.
    pub fn add_probe_site(&mut self, node: usize) -> Result<usize> {
        let shapes = self.node_shapes()?;
        let shape = shapes
            .get(node)
            .ok_or_else(|| Error::Input(format!("no node {node}")))?;
        let channels = shape[0];
        let id = self.sites.len();
        self.sites.push(Site {
            id,
            node,
            channels,
            bn: None,
            kind: SiteKind::Probe,
            keep: vec![true; channels],
        });
        self.version += 1;
        Ok(id)
    }

    /// Replaces the channel masks of all prunable sites (in site order).
    pub fn set_masks(&mut self, keep: &[Vec<bool>]) -> Result<()> {
        let prunable: Vec<usize> = self
            .sites
            .iter()
            .filter(|s| s.kind == SiteKind::Prunable)
            .map(|s| s.id)
            .collect();
        if keep.len() != prunable.len() {
            return Err(Error::Input(format!(
                "mask covers {} sites, model has {}",
                keep.len(),
                prunable.len()
            )));
        }
        for (&id, k) in prunable.iter().zip(keep) {
            if k.len() != self.sites[id].channels {
                return Err(Error::Input(format!(
                    "mask for site {id} has {} channels, site has {}",
                    k.len(),
                    self.sites[id].channels
                )));
            }
        }
        for (&id, k) in prunable.iter().zip(keep) {
            self.sites[id].keep = k.clone();
        }
        self.version += 1;
        Ok(())
    }

    /// Per-node output channel masks implied by the site masks: a pruned
    /// channel is zeroed at its producing node and at its BatchNorm.
    pub(crate) fn node_masks(&self) -> Vec<Option<Vec<bool>>> {
        let mut masks = vec![None; self.nodes.len()];
        for site in self.prunable_sites() {
            if site.keep.iter().all(|&k| k) {
                continue;
            }
            masks[site.node] = Some(site.keep.clone());
            if let Some(bn) = site.bn {
                masks[bn] = Some(site.keep.clone());
            }
        }
        masks
    }


    pub(crate) fn set_sites(&mut self, sites: Vec<Site>) {
        self.sites = sites;
        self.version += 1;
    }

    /// Converts the element type of every tensor.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let nodes = self
            .nodes
            .iter()
            .map(|n| {
                let layer = match &n.layer {
                    Layer::Conv2d {
                        weight,
                        bias,
                        stride,
                        padding,
                    } => Layer::Conv2d {
                        weight: weight.cast(),
                        bias: bias.as_ref().map(|b| b.cast()),
                        stride: *stride,
                        padding: *padding,
                    },
                    Layer::Linear { weight, bias } => Layer::Linear {
                        weight: weight.cast(),
                        bias: bias.as_ref().map(|b| b.cast()),
                    },
                    Layer::BatchNorm {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                        eps,
                        momentum,
                    } => Layer::BatchNorm {
                        gamma: gamma.cast(),
                        beta: beta.cast(),
                        running_mean: running_mean.cast(),
                        running_var: running_var.cast(),
                        eps: U::of(eps.f64()),
                        momentum: U::of(momentum.f64()),
                    },
                    Layer::ReLU => Layer::ReLU,
                    Layer::AvgPool { kernel } => Layer::AvgPool { kernel: *kernel },
                    Layer::MaxPool { kernel } => Layer::MaxPool { kernel: *kernel },
                    Layer::ResidualAdd => Layer::ResidualAdd,
                    Layer::Flatten => Layer::Flatten,
                };
                LayerNode {
                    layer,
                    inputs: n.inputs.clone(),
                    prunable: n.prunable,
                    grads: n.grads.iter().map(|g| g.cast()).collect(),
                }
            })
            .collect();
        Model {
            nodes,
            sites: self.sites.clone(),
            input_shape: self.input_shape.clone(),
            num_classes: self.num_classes,
            id: fresh_id(),
            version: 0,
        }
    }
}

/// Incremental graph construction with Kaiming-uniform (fan-in) initialisation.
///
/// Weights are drawn from `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, biases from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, BatchNorm starts at γ=1, β=0 with
/// unit running variance. All draws come from one ChaCha8 stream in node order.
pub struct ModelBuilder<T> {
    nodes: Vec<LayerNode<T>>,
    shapes: Vec<Vec<usize>>,
    input_shape: Vec<usize>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> ModelBuilder<T> {
    pub fn new(input_shape: &[usize], seed: u64) -> Self {
        ModelBuilder {
            nodes: Vec::new(),
            shapes: Vec::new(),
            input_shape: input_shape.to_vec(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn shape_of(&self, src: Source) -> &[usize] {
        match src {
            Source::Input => &self.input_shape,
            Source::Node(i) => &self.shapes[i],
        }
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let dist = Uniform::new_inclusive(-bound, bound);
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(dist.sample(&mut self.rng))).collect();
        Tensor::new(shape, data).expect("valid init shape")
    }

    /// Appends a node; panics if the operands do not fit (builder misuse).
    pub fn push(&mut self, layer: Layer<T>, inputs: Vec<Source>, prunable: bool) -> Source {
        let ins: Vec<Vec<usize>> = inputs.iter().map(|&s| self.shape_of(s).to_vec()).collect();
        let shape = layer
            .output_shape(&ins)
            .unwrap_or_else(|e| panic!("node {}: {e}", self.nodes.len()));
        self.nodes.push(LayerNode::new(layer, inputs, prunable));
        self.shapes.push(shape);
        Source::Node(self.nodes.len() - 1)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        x: Source,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        prunable: bool,
    ) -> Source {
        let c = self.shape_of(x)[0];
        let fan_in = (c * kernel * kernel) as f64;
        let weight = self.uniform(&[out_channels, c, kernel, kernel], (6.0 / fan_in).sqrt());
        let bias = bias.then(|| self.uniform(&[out_channels], 1.0 / fan_in.sqrt()));
        self.push(
            Layer::Conv2d {
                weight,
                bias,
                stride,
                padding,
            },
            vec![x],
            prunable,
        )
    }

    pub fn linear(&mut self, x: Source, out_features: usize, bias: bool, prunable: bool) -> Source {
        let fan_in = self.shape_of(x)[0] as f64;
        let weight = self.uniform(&[out_features, fan_in as usize], (6.0 / fan_in).sqrt());
        let bias = bias.then(|| self.uniform(&[out_features], 1.0 / fan_in.sqrt()));
        self.push(Layer::Linear { weight, bias }, vec![x], prunable)
    }

    pub fn batch_norm(&mut self, x: Source) -> Source {
        let c = self.shape_of(x)[0];
        self.push(
            Layer::BatchNorm {
                gamma: Tensor::full(&[c], T::one()),
                beta: Tensor::zeros(&[c]),
                running_mean: Tensor::zeros(&[c]),
                running_var: Tensor::full(&[c], T::one()),
                eps: T::of(1e-5),
                momentum: T::of(0.1),
            },
            vec![x],
            false,
        )
    }

    pub fn relu(&mut self, x: Source) -> Source {
        self.push(Layer::ReLU, vec![x], false)
    }

    pub fn max_pool(&mut self, x: Source, kernel: usize) -> Source {
        self.push(Layer::MaxPool { kernel }, vec![x], false)
    }

    pub fn avg_pool(&mut self, x: Source, kernel: usize) -> Source {
        self.push(Layer::AvgPool { kernel }, vec![x], false)
    }

    pub fn flatten(&mut self, x: Source) -> Source {
        self.push(Layer::Flatten, vec![x], false)
    }

    pub fn add(&mut self, a: Source, b: Source) -> Source {
        self.push(Layer::ResidualAdd, vec![a, b], false)
    }

    pub fn build(self, num_classes: usize) -> Result<Model<T>> {
        Model::from_nodes(self.nodes, &self.input_shape, num_classes)
    }
}
