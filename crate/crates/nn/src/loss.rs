//! Scalar losses returning `(value, gradient w.r.t. the prediction)`.

use crate::error::{NnError, Result};
use crate::tensor::{Real, Tensor};

/// Row-wise softmax of a `[N, C]` logit matrix.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c) = logits.as_matrix("softmax")?;
    let mut out = Vec::with_capacity(n * c);
    for r in 0..n {
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    Tensor::new(vec![n, c], out)
}

fn log_softmax_row<T: Real>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    row.iter().map(|&v| v - lse).collect()
}

/// Mean softmax cross-entropy against integer labels.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, c) = logits.as_matrix("cross_entropy")?;
    if labels.len() != n {
        return Err(NnError::Invalid(format!("{} labels for a batch of {n}", labels.len())));
    }
    let inv_n = T::one() / T::lit(n as f64);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(n * c);
    for (r, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(NnError::Invalid(format!("label {label} out of range for {c} classes")));
        }
        let logp = log_softmax_row(logits.row(r));
        loss -= logp[label];
        grad.extend(logp.iter().enumerate().map(|(j, &lp)| {
            let onehot = if j == label { T::one() } else { T::zero() };
            (lp.exp() - onehot) * inv_n
        }));
    }
    Ok((loss * inv_n, Tensor::new(vec![n, c], grad)?))
}

/// Mean cross-entropy from the uniform distribution to the predicted one:
/// `-(1/C) Σ_c log p_c`, minimized (at `ln C`) by a uniform prediction.
pub fn uniform_cross_entropy<T: Real>(logits: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    let (n, c) = logits.as_matrix("uniform_cross_entropy")?;
    let inv_n = T::one() / T::lit(n as f64);
    let inv_c = T::one() / T::lit(c as f64);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(n * c);
    for r in 0..n {
        let logp = log_softmax_row(logits.row(r));
        loss -= logp.iter().copied().sum::<T>() * inv_c;
        grad.extend(logp.iter().map(|&lp| (lp.exp() - inv_c) * inv_n));
    }
    Ok((loss * inv_n, Tensor::new(vec![n, c], grad)?))
}

/// Squared error summed over each sample's elements, averaged over the batch.
pub fn batch_sse<T: Real>(prediction: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if prediction.shape() != target.shape() {
        return Err(NnError::ShapeMismatch {
            context: "squared error".into(),
            expected: target.shape().to_vec(),
            actual: prediction.shape().to_vec(),
        });
    }
    let n = prediction.batch();
    let inv_n = T::one() / T::lit(n as f64);
    let two = T::lit(2.0);
    let mut loss = 0.0f64;
    let grad: Vec<T> = prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            loss += (d * d).as_f64();
            two * d * inv_n
        })
        .collect();
    Ok((T::lit(loss) * inv_n, Tensor::new(prediction.shape().to_vec(), grad)?))
}

/// Plain mean squared error over all elements.
pub fn mse<T: Real>(prediction: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    let (sse, mut grad) = batch_sse(prediction, target)?;
    let per = T::lit(prediction.row_len().max(1) as f64);
    grad.scale(T::one() / per);
    Ok((sse / per, grad))
}
