use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images in `[0, 1]` with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    /// `None` for unlabeled data; otherwise one label per image.
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
    pub split: Split,
    pub seed: u64,
}

impl Dataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Option<Vec<usize>>,
        num_classes: usize,
        split: Split,
        seed: u64,
    ) -> Result<Dataset> {
        if images.rank() != 4 {
            return Err(Error::Input(format!(
                "dataset images must be M×C×H×W, got {:?}",
                images.shape()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != images.batch() {
                return Err(Error::Input(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.batch()
                )));
            }
            if let Some(&bad) = l.iter().find(|&&v| v >= num_classes) {
                return Err(Error::Input(format!(
                    "label {bad} outside [0, {num_classes})"
                )));
            }
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.images.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Input("dataset has no labels".into()))
    }

    /// The first `d` examples, in stored order.
    pub fn prefix(&self, d: usize) -> Result<Dataset> {
        if d == 0 || d > self.len() {
            return Err(Error::Input(format!(
                "subset size {d} outside [1, {}]",
                self.len()
            )));
        }
        Ok(Dataset {
            images: self.images.slice_batch(0, d)?,
            labels: self.labels.as_ref().map(|l| l[..d].to_vec()),
            ..self.clone()
        })
    }

    pub fn without_labels(&self) -> Dataset {
        Dataset {
            labels: None,
            ..self.clone()
        }
    }

    /// Images and labels for the given example indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Option<Vec<usize>>)> {
        let images = self.images.gather_batch(indices)?;
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Ok((images, labels))
    }

    /// Example-index batches: in order without a seed, otherwise a seeded
    /// permutation. The last batch may be short.
    pub fn batches(&self, batch_size: usize, shuffle: Option<u64>) -> Vec<Vec<usize>> {
        batch_indices(self.len(), batch_size, shuffle)
    }
}

pub(crate) fn batch_indices(len: usize, batch_size: usize, shuffle: Option<u64>) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(seed) = shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}
