use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

/// Mean squared error over every element, with its gradient w.r.t. `pred`.
pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::Argument(format!(
            "mse shape mismatch: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Argument("mse of an empty tensor".into()));
    }
    let n = T::from_usize(pred.len()).unwrap();
    let two = T::one() + T::one();
    let mut sum = T::zero();
    let grad: Vec<T> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            sum += d * d;
            two * d / n
        })
        .collect();
    Ok((sum / n, Tensor::from_vec(pred.shape(), grad)?))
}

/// Row-wise softmax of a `[N, K]` logit matrix.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let (n, _) = logits.dims2();
    let mut out = logits.clone();
    for i in 0..n {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Per-sample cross-entropy and the softmax probabilities it was computed from.
pub fn cross_entropy_terms<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(Vec<T>, Tensor<T>)> {
    let (n, k) = logits.dims2();
    if labels.len() != n {
        return Err(Error::Argument(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Argument(format!("label {bad} outside {k} classes")));
    }
    let probs = softmax(logits);
    let losses = (0..n)
        .map(|i| {
            let row = logits.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            lse - row[labels[i]]
        })
        .collect();
    Ok((losses, probs))
}

/// Gradient of `sum_i weight_i * CE_i` with respect to the logits.
pub fn cross_entropy_grad<T: Scalar>(probs: &Tensor<T>, labels: &[usize], weights: &[T]) -> Tensor<T> {
    let mut g = probs.clone();
    for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
        let row = g.row_mut(i);
        row[y] -= T::one();
        row.iter_mut().for_each(|v| *v *= w);
    }
    g
}

/// Mean cross-entropy with its logit gradient.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (losses, probs) = cross_entropy_terms(logits, labels)?;
    let n = T::from_usize(labels.len().max(1)).unwrap();
    let w = vec![T::one() / n; labels.len()];
    let total = losses.iter().copied().sum::<T>() / n;
    Ok((total, cross_entropy_grad(&probs, labels, &w)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_closed_forms() {
        let ones = Tensor::<f64>::full(&[2, 3], 1.0);
        let zeros = Tensor::<f64>::zeros(&[2, 3]);
        assert_eq!(mse(&zeros, &ones).unwrap().0, 1.0);
        assert_eq!(mse(&ones, &ones).unwrap().0, 0.0);
        assert!(mse(&ones, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_k() {
        let logits = Tensor::<f64>::zeros(&[2, 4]);
        let (l, _) = cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&logits, &[4, 0]).is_err());
    }

    #[test]
    fn cross_entropy_is_stable_for_large_logits() {
        let logits = Tensor::<f32>::from_vec(&[1, 2], vec![1000.0, -1000.0]).unwrap();
        let (l, g) = cross_entropy(&logits, &[1]).unwrap();
        assert!(l.is_finite() && (l - 2000.0).abs() < 1e-2);
        assert!(g.all_finite());
    }
}
