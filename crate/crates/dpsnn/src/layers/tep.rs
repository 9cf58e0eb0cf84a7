//! Temporal enhanced pooling: weights each timestep's spike map by the
//! normalized mean fire rate before spatial average pooling, so persistently
//! active positions are amplified and rarely active ones damped.
//!
//! Forward, over a window of T spike maps O^t:
//!   F  = (Σ_t O^t) / T
//!   F̂  = instance_norm(F)            (no affine)
//!   X^t = avg_pool(O^t ⊙ (F̂ + 1))
//!
//! The backward pass differentiates both the direct product path and the
//! fire-rate path through the normalization.

use crate::layers::norm::{instance_norm_backward, instance_norm_forward, NormCache};
use crate::layers::pool::{avg_pool_backward, avg_pool_forward};
use crate::layers::LayerError;
use crate::real::{r, Real};
use crate::tensor::Tensor;

/// Forward-pass state needed by [`tep_backward`].
#[derive(Clone, Debug)]
pub struct TepCache<R: Real> {
    /// Mean fire rate per position, pre-normalization.
    pub f: Tensor<R>,
    /// Normalized fire rate; the enhancement factor is `f_hat + 1`.
    pub f_hat: Tensor<R>,
    pub norm: NormCache,
}

/// Validating entry point: in debug builds, requires every input value to be
/// exactly 0 or 1; release builds skip the scan.
pub fn tep_forward<R: Real>(
    spikes: &[Tensor<R>],
    k: usize,
    stride: usize,
) -> Result<(Vec<Tensor<R>>, TepCache<R>), LayerError> {
    if cfg!(debug_assertions) {
        for (t, map) in spikes.iter().enumerate() {
            for (index, &v) in map.data().iter().enumerate() {
                if v != R::zero() && v != R::one() {
                    return Err(LayerError::NonBinaryInput {
                        value: v.as_f64(),
                        t,
                        index,
                    });
                }
            }
        }
    }
    tep_forward_unchecked(spikes, k, stride)
}

/// Same computation without the binary-input check. The arithmetic is well
/// defined for any real inputs, which gradient checks rely on; trainer code
/// always feeds genuine spike maps.
pub fn tep_forward_unchecked<R: Real>(
    spikes: &[Tensor<R>],
    k: usize,
    stride: usize,
) -> Result<(Vec<Tensor<R>>, TepCache<R>), LayerError> {
    let t_len = spikes.len();
    let first = spikes.first().ok_or(LayerError::EmptyTimeWindow)?;
    let shape = first.shape();
    for map in spikes {
        if map.shape() != shape {
            return Err(LayerError::ShapeMismatch {
                expected: shape,
                found: map.shape(),
            });
        }
    }

    let mut f = Tensor::zeros(shape);
    for map in spikes {
        for (acc, &v) in f.data_mut().iter_mut().zip(map.data()) {
            *acc += v;
        }
    }
    let inv_t = r::<R>(1.0 / t_len as f64);
    for v in f.data_mut() {
        *v *= inv_t;
    }

    let (f_hat, norm) = instance_norm_forward(&f);

    let mut out = Vec::with_capacity(t_len);
    let mut z = Tensor::zeros(shape);
    for map in spikes {
        for ((zv, &ov), &fh) in z.data_mut().iter_mut().zip(map.data()).zip(f_hat.data()) {
            *zv = ov * (fh + R::one());
        }
        out.push(avg_pool_forward(&z, k, stride)?);
    }
    Ok((out, TepCache { f, f_hat, norm }))
}

/// Gradient of the pooled outputs with respect to every input spike map.
///
/// With Z^t = O^t ⊙ (F̂ + 1):
///   dZ^t = avg_pool_backward(dX^t)
///   dO^t = dZ^t ⊙ (F̂ + 1) + dF / T
/// where dF flows through the normalization from dF̂ = Σ_t dZ^t ⊙ O^t.
pub fn tep_backward<R: Real>(
    spikes: &[Tensor<R>],
    cache: &TepCache<R>,
    grad_out: &[Tensor<R>],
    k: usize,
    stride: usize,
) -> Result<Vec<Tensor<R>>, LayerError> {
    if grad_out.len() != spikes.len() {
        return Err(LayerError::TimeLengthMismatch {
            expected: spikes.len(),
            found: grad_out.len(),
        });
    }
    let shape = cache.f.shape();
    let t_len = spikes.len();

    let mut grads = Vec::with_capacity(t_len);
    let mut grad_f_hat = Tensor::zeros(shape);
    for (map, gx) in spikes.iter().zip(grad_out) {
        let dz = avg_pool_backward(shape, k, stride, gx);
        let mut go = Tensor::zeros(shape);
        for i in 0..shape.len() {
            let dzv = dz.data()[i];
            go.data_mut()[i] = dzv * (cache.f_hat.data()[i] + R::one());
            grad_f_hat.data_mut()[i] += dzv * map.data()[i];
        }
        grads.push(go);
    }

    let grad_f = instance_norm_backward(&cache.f, &cache.norm, &grad_f_hat);
    let inv_t = r::<R>(1.0 / t_len as f64);
    for go in &mut grads {
        for (gv, &gf) in go.data_mut().iter_mut().zip(grad_f.data()) {
            *gv += gf * inv_t;
        }
    }
    Ok(grads)
}
