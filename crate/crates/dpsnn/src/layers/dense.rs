//! Fully-connected layer over flattened feature vectors.

use crate::layers::LayerError;
use crate::matmul::{matvec_acc, matvec_t_acc, outer_acc};
use crate::real::Real;

/// y = W·x + b with W stored row-major as [out_dim × in_dim].
pub fn dense_forward<R: Real>(
    weight: &[R],
    bias: &[R],
    x: &[R],
) -> Result<Vec<R>, LayerError> {
    let out_dim = bias.len();
    if out_dim == 0 || weight.len() != out_dim * x.len() {
        return Err(LayerError::WidthMismatch {
            expected: out_dim * x.len(),
            found: weight.len(),
        });
    }
    let mut y = bias.to_vec();
    matvec_acc(&mut y, weight, x, out_dim, x.len());
    Ok(y)
}

/// Accumulates dW += dy ⊗ x and db += dy, and returns dx = Wᵀ·dy.
pub fn dense_backward<R: Real>(
    weight: &[R],
    x: &[R],
    grad_y: &[R],
    grad_w: &mut [R],
    grad_b: &mut [R],
) -> Vec<R> {
    outer_acc(grad_w, grad_y, x, grad_y.len(), x.len());
    for (gb, &gy) in grad_b.iter_mut().zip(grad_y) {
        *gb += gy;
    }
    let mut gx = vec![R::zero(); x.len()];
    matvec_t_acc(&mut gx, weight, grad_y, grad_y.len(), x.len());
    gx
}
