use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn check_labels<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Input(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Input(format!("label {bad} outside [0, {k})")));
    }
    Ok((n, k))
}

/// Row-wise softmax minus one-hot, without batch averaging, plus the summed
/// negative log-likelihood.
pub fn softmax_cross_entropy_rows<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>)> {
    let (n, k) = check_labels(logits, labels)?;
    let mut grad = vec![T::zero(); n * k];
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits.data()[r * k..(r + 1) * k];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
        let exps: Vec<f64> = row.iter().map(|v| (v.f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        total += z.ln() - (row[label].f64() - max);
        for (j, e) in exps.iter().enumerate() {
            let target = if j == label { 1.0 } else { 0.0 };
            grad[r * k + j] = T::of(e / z - target);
        }
    }
    Ok((total, Tensor::new(logits.shape(), grad)?))
}

/// Mean cross-entropy over the batch and its gradient `(softmax − onehot)/N`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>)> {
    let (total, grad) = softmax_cross_entropy_rows(logits, labels)?;
    let n = labels.len() as f64;
    Ok((total / n, grad.scale(T::of(1.0 / n))))
}

/// Index of the largest logit per row; ties go to the lowest class index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let (n, k) = logits.dims2()?;
    Ok((0..n)
        .map(|r| {
            let row = &logits.data()[r * k..(r + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}
