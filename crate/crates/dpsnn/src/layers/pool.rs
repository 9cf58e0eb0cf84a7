//! Spatial pooling: max and average, each with an exact backward pass.
//!
//! Pooling never pads, so the output extent is floor((H - K) / stride) + 1.
//! Max pooling records the flat index of the winning element per window; ties
//! resolve to the first element in row-major window order, and the backward
//! pass routes the full gradient to that recorded winner.

use crate::layers::LayerError;
use crate::real::{r, Real};
use crate::tensor::{Shape, Tensor};

/// Output shape of a K-by-K pooling window with the given stride, no padding.
pub fn pool_out_shape(input: Shape, k: usize, stride: usize) -> Result<Shape, LayerError> {
    if stride == 0 {
        return Err(LayerError::ZeroStride);
    }
    if k == 0 || k > input.h || k > input.w {
        return Err(LayerError::KernelTooLarge { k, input, pad: 0 });
    }
    Ok(Shape::new(
        input.c,
        (input.h - k) / stride + 1,
        (input.w - k) / stride + 1,
    ))
}

/// Max pooling. Returns the pooled tensor and, per output element, the flat
/// input index (within the whole tensor) of the chosen maximum.
pub fn max_pool_forward<R: Real>(
    x: &Tensor<R>,
    k: usize,
    stride: usize,
) -> Result<(Tensor<R>, Vec<u32>), LayerError> {
    let out_shape = pool_out_shape(x.shape(), k, stride)?;
    let mut y = Tensor::zeros(out_shape);
    let mut argmax = vec![0u32; out_shape.len()];
    let (h, w) = (x.shape().h, x.shape().w);
    let mut o = 0usize;
    for c in 0..x.shape().c {
        let plane = x.channel(c);
        let base = c * h * w;
        for oy in 0..out_shape.h {
            for ox in 0..out_shape.w {
                let (y0, x0) = (oy * stride, ox * stride);
                let mut best = plane[y0 * w + x0];
                let mut best_at = y0 * w + x0;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = (y0 + ky) * w + (x0 + kx);
                        if plane[idx] > best {
                            best = plane[idx];
                            best_at = idx;
                        }
                    }
                }
                y.data_mut()[o] = best;
                argmax[o] = (base + best_at) as u32;
                o += 1;
            }
        }
    }
    Ok((y, argmax))
}

/// Scatter the output gradient back to the recorded argmax positions.
pub fn max_pool_backward<R: Real>(
    input_shape: Shape,
    argmax: &[u32],
    grad_y: &Tensor<R>,
) -> Tensor<R> {
    let mut gx = Tensor::zeros(input_shape);
    for (i, &src) in argmax.iter().enumerate() {
        gx.data_mut()[src as usize] += grad_y.data()[i];
    }
    gx
}

/// Average pooling over K-by-K windows.
pub fn avg_pool_forward<R: Real>(
    x: &Tensor<R>,
    k: usize,
    stride: usize,
) -> Result<Tensor<R>, LayerError> {
    let out_shape = pool_out_shape(x.shape(), k, stride)?;
    let mut y = Tensor::zeros(out_shape);
    let w = x.shape().w;
    let inv = r::<R>(1.0 / (k * k) as f64);
    let mut o = 0usize;
    for c in 0..x.shape().c {
        let plane = x.channel(c);
        for oy in 0..out_shape.h {
            for ox in 0..out_shape.w {
                let (y0, x0) = (oy * stride, ox * stride);
                let mut acc = R::zero();
                for ky in 0..k {
                    for kx in 0..k {
                        acc += plane[(y0 + ky) * w + (x0 + kx)];
                    }
                }
                y.data_mut()[o] = acc * inv;
                o += 1;
            }
        }
    }
    Ok(y)
}

/// Spread each output gradient uniformly over its K-by-K source window.
pub fn avg_pool_backward<R: Real>(
    input_shape: Shape,
    k: usize,
    stride: usize,
    grad_y: &Tensor<R>,
) -> Tensor<R> {
    let mut gx = Tensor::zeros(input_shape);
    let w = input_shape.w;
    let inv = r::<R>(1.0 / (k * k) as f64);
    let out = grad_y.shape();
    let mut o = 0usize;
    for c in 0..input_shape.c {
        let sp = input_shape.spatial();
        let plane = &mut gx.data_mut()[c * sp..(c + 1) * sp];
        for oy in 0..out.h {
            for ox in 0..out.w {
                let g = grad_y.data()[o] * inv;
                o += 1;
                let (y0, x0) = (oy * stride, ox * stride);
                for ky in 0..k {
                    for kx in 0..k {
                        plane[(y0 + ky) * w + (x0 + kx)] += g;
                    }
                }
            }
        }
    }
    gx
}
