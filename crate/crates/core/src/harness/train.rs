use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, softmax_cross_entropy, Layer, Mode, Model};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// L2 penalty on Conv2d/Linear weights (not biases or BatchNorm).
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

fn decays(layer: &Layer<impl Scalar>) -> Vec<bool> {
    match layer {
        Layer::Conv2d { bias, .. } | Layer::Linear { bias, .. } => {
            let mut v = vec![true];
            if bias.is_some() {
                v.push(false);
            }
            v
        }
        other => vec![false; other.params().len()],
    }
}

/// Mini-batch SGD with momentum on the mean cross-entropy. Batches are
/// reshuffled every epoch from `seed`; a trailing batch of one example is
/// dropped because train-mode BatchNorm needs at least two.
pub fn train<T: Scalar>(model: &mut Model<T>, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    let labels = data.labels()?;
    if cfg.batch_size < 2 {
        return Err(Error::Input("training batch size must be at least 2".into()));
    }
    let mut velocity: Vec<Vec<Tensor<T>>> = model
        .nodes()
        .iter()
        .map(|n| n.layer.params().iter().map(|p| Tensor::zeros(p.shape())).collect())
        .collect();
    let (lr, mu, wd) = (T::of(cfg.learning_rate), T::of(cfg.momentum), T::of(cfg.weight_decay));
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order_seed = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(epoch as u64);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0, 0);
        for batch in data.batches(cfg.batch_size, Some(order_seed)) {
            if batch.len() < 2 {
                continue;
            }
            let x = data.images.gather_batch(&batch)?.cast::<T>();
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            model.zero_grads();
            let (logits, record) = model.forward(&x, Mode::Train)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: format!("loss became {loss}"),
                });
            }
            model.backward(&record, &grad)?;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
            correct += argmax_rows(&logits)?
                .iter()
                .zip(&y)
                .filter(|(p, t)| p == t)
                .count();
            for (node, vel) in model.nodes_mut().iter_mut().zip(&mut velocity) {
                let decay = decays(&node.layer);
                let grads = node.grads.clone();
                for (((p, g), v), d) in node.layer.params_mut().into_iter().zip(&grads).zip(vel).zip(decay) {
                    for ((w, &gw), vw) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        let step = if d { gw + wd * *w } else { gw };
                        *vw = mu * *vw + step;
                        *w = *w - lr * *vw;
                    }
                }
            }
        }
        if seen == 0 {
            return Err(Error::Input("no training batch has two or more examples".into()));
        }
        let entry = EpochLog {
            epoch,
            loss: loss_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
        };
        let params_finite = model
            .nodes()
            .iter()
            .all(|n| n.layer.params().iter().all(|p| p.all_finite()));
        if !entry.loss.is_finite() || !params_finite {
            return Err(Error::Training {
                epoch,
                message: "parameters diverged".into(),
            });
        }
        log.push(entry);
    }
    Ok(log)
}

/// Eval-mode top-1 accuracy.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset, batch_size: usize) -> Result<f64> {
    let labels = data.labels()?;
    let mut correct = 0;
    for batch in data.batches(batch_size.max(1), None) {
        let x = data.images.gather_batch(&batch)?.cast::<T>();
        let pred = argmax_rows(&model.infer(&x)?)?;
        correct += batch.iter().zip(pred).filter(|(&i, p)| labels[i] == *p).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_shapes, GlyphSpec, Split};
    use crate::nn::{build_reference, LayerNode, ReferenceConfig, Source};

    fn glyphs(per_class: usize, seed: u64) -> Dataset {
        generate_shapes(&GlyphSpec { per_class, seed, ..Default::default() }).unwrap()
    }

    #[test]
    fn zero_epochs_change_nothing() {
        let mut m = build_reference::<f32>("mlp_small", &ReferenceConfig::default()).unwrap();
        let before = m.clone();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        assert!(train(&mut m, &glyphs(2, 0), &cfg).unwrap().is_empty());
        for (a, b) in m.nodes().iter().zip(before.nodes()) {
            assert_eq!(a.layer, b.layer);
        }
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let data = glyphs(20, 3);
        let cfg = TrainConfig { epochs: 4, batch_size: 16, ..Default::default() };
        let run = || {
            let mut m = build_reference::<f32>("mlp_small", &ReferenceConfig::default()).unwrap();
            let log = train(&mut m, &data, &cfg).unwrap();
            (m, log)
        };
        let (a, log_a) = run();
        let (b, log_b) = run();
        assert_eq!(log_a, log_b);
        assert_eq!(a.nodes()[0].layer, b.nodes()[0].layer);
        assert!(log_a[3].loss < log_a[0].loss, "{log_a:?}");
    }

    #[test]
    fn divergence_names_the_epoch() {
        let mut m = build_reference::<f32>("mlp_small", &ReferenceConfig::default()).unwrap();
        let cfg = TrainConfig { epochs: 3, learning_rate: 1e30, momentum: 0.0, ..Default::default() };
        match train(&mut m, &glyphs(8, 0), &cfg) {
            Err(Error::Training { epoch, .. }) => assert!(epoch < 3),
            other => panic!("expected a training error, got {other:?}"),
        }
    }

    #[test]
    fn constant_logits_pick_the_lowest_class() {
        let bias = Tensor::new(&[3], vec![0.5f64, 0.5, 0.1]).unwrap();
        let weight = Tensor::zeros(&[3, 1]);
        let nodes = vec![
            LayerNode::new(Layer::Flatten, vec![Source::Input], false),
            LayerNode::new(Layer::Linear { weight, bias: Some(bias) }, vec![Source::Node(0)], false),
        ];
        let m = Model::from_nodes(nodes, &[1, 1, 1], 3).unwrap();
        let images = Tensor::new(&[5, 1, 1, 1], vec![0.1f32, 0.2, 0.3, 0.4, 0.5]).unwrap();
        let data = Dataset::new(images, Some(vec![0, 1, 0, 2, 0]), 3, Split::Test, 0).unwrap();
        assert_eq!(evaluate(&m, &data, 2).unwrap(), 0.6);
        assert_eq!(evaluate(&m, &data, 2).unwrap(), evaluate(&m, &data, 5).unwrap());
    }

    #[test]
    fn two_examples_can_be_memorised() {
        let data = glyphs(1, 5).prefix(2).unwrap();
        let mut m = build_reference::<f32>("mlp_small", &ReferenceConfig::default()).unwrap();
        let cfg = TrainConfig { epochs: 60, batch_size: 2, learning_rate: 0.05, ..Default::default() };
        train(&mut m, &data, &cfg).unwrap();
        assert_eq!(evaluate(&m, &data, 2).unwrap(), 1.0);
    }
}
