use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::softmax_cross_entropy_rows;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SourceKind {
    /// Per-example cross-entropy gradient `softmax − onehot`.
    Loss,
    /// Standard-normal rows keyed by `(seed, example index)`; labels unused.
    Random,
}

/// Where the injected output gradient comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GradientSource {
    pub kind: SourceKind,
    /// Scale every per-example row to unit L2 norm (zero rows stay zero).
    pub normalize: bool,
    /// Used only by [`SourceKind::Random`].
    pub seed: u64,
}

impl GradientSource {
    pub fn loss(normalize: bool) -> Self {
        GradientSource {
            kind: SourceKind::Loss,
            normalize,
            seed: 0,
        }
    }

    pub fn random(seed: u64, normalize: bool) -> Self {
        GradientSource {
            kind: SourceKind::Random,
            normalize,
            seed,
        }
    }

    /// `"loss"` or `"random"`.
    pub fn name(&self) -> &'static str {
        match self.kind {
            SourceKind::Loss => "loss",
            SourceKind::Random => "random",
        }
    }

    pub fn from_name(name: &str, normalize: bool, seed: u64) -> Result<Self> {
        match name {
            "loss" => Ok(GradientSource { seed, ..Self::loss(normalize) }),
            "random" => Ok(Self::random(seed, normalize)),
            other => Err(Error::Input(format!(
                "unknown gradient source `{other}` (expected loss or random)"
            ))),
        }
    }

    pub fn needs_labels(&self) -> bool {
        self.kind == SourceKind::Loss
    }
}

/// The gradient injected at the logits for a batch whose first row is global
/// example `first_example`. Random rows depend only on the seed and the
/// example index, never on how examples are batched.
pub fn make_output_gradient<T: Scalar>(
    source: &GradientSource,
    logits: &Tensor<T>,
    labels: Option<&[usize]>,
    first_example: usize,
) -> Result<Tensor<T>> {
    let (n, k) = logits.dims2()?;
    let mut rows: Vec<f64> = match source.kind {
        SourceKind::Loss => {
            let labels = labels.ok_or_else(|| {
                Error::Input("the loss gradient source needs labels".into())
            })?;
            softmax_cross_entropy_rows(logits, labels)?.1.to_f64_vec()
        }
        SourceKind::Random => {
            let mut out = Vec::with_capacity(n * k);
            let mut rng = ChaCha8Rng::seed_from_u64(source.seed);
            for r in 0..n {
                rng.set_stream((first_example + r) as u64);
                rng.set_word_pos(0);
                out.extend((0..k).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
            }
            out
        }
    };
    if source.normalize {
        for row in rows.chunks_mut(k) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }
    Tensor::new(&[n, k], rows.into_iter().map(T::of).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(n: usize) -> Tensor<f64> {
        Tensor::new(&[n, 3], (0..3 * n).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn normalized_random_rows_have_unit_norm() {
        let g = make_output_gradient(&GradientSource::random(4, true), &logits(5), None, 0).unwrap();
        for row in g.data().chunks(3) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_loss_rows_are_zero_even_normalized() {
        let l = Tensor::new(&[1, 3], vec![0.0, 800.0, 0.0]).unwrap();
        for normalize in [false, true] {
            let g = make_output_gradient(&GradientSource::loss(normalize), &l, Some(&[1]), 0).unwrap();
            assert!(g.data().iter().all(|&v| v == 0.0), "{g:?}");
        }
    }

    #[test]
    fn random_rows_ignore_batching() {
        let src = GradientSource::random(11, false);
        let whole = make_output_gradient(&src, &logits(4), None, 6).unwrap();
        for r in 0..4 {
            let single = make_output_gradient(&src, &logits(1), None, 6 + r).unwrap();
            assert_eq!(single.data(), &whole.data()[r * 3..(r + 1) * 3]);
        }
        let other = make_output_gradient(&GradientSource::random(12, false), &logits(4), None, 6).unwrap();
        assert_ne!(other, whole);
    }

    #[test]
    fn loss_source_requires_labels() {
        let r = make_output_gradient(&GradientSource::loss(false), &logits(2), None, 0);
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn loss_rows_are_softmax_minus_onehot() {
        let l = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        let g = make_output_gradient(&GradientSource::loss(false), &l, Some(&[0]), 0).unwrap();
        assert_eq!(g.data(), &[-0.5, 0.5]);
        let g = make_output_gradient(&GradientSource::loss(true), &l, Some(&[0]), 0).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((g.data()[0] + h).abs() < 1e-15 && (g.data()[1] - h).abs() < 1e-15);
    }
}
