//! Softmax cross-entropy with log-sum-exp stabilization.

use crate::layers::LayerError;
use crate::real::Real;

/// Numerically stable softmax.
pub fn softmax<R: Real>(logits: &[R]) -> Vec<R> {
    let max = logits.iter().cloned().fold(R::neg_infinity(), R::max);
    let exps: Vec<R> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: R = exps.iter().cloned().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of softmax(logits) against an integer label. Returns the
/// loss and its exact gradient with respect to the logits (p − onehot).
pub fn cross_entropy<R: Real>(
    logits: &[R],
    label: usize,
) -> Result<(R, Vec<R>), LayerError> {
    if label >= logits.len() {
        return Err(LayerError::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.iter().cloned().fold(R::neg_infinity(), R::max);
    let log_sum: R = logits
        .iter()
        .map(|&z| (z - max).exp())
        .sum::<R>()
        .ln()
        + max;
    let loss = log_sum - logits[label];
    let mut grad = softmax(logits);
    grad[label] -= R::one();
    Ok((loss, grad))
}

/// Index of the largest logit; ties resolve to the lowest index.
pub fn argmax<R: Real>(logits: &[R]) -> usize {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}
