//! 2-D convolution (cross-correlation, no kernel flip) via im2col and the
//! shared matmul kernels. Output spatial size per axis is
//! `floor((H + 2·pad − kH) / stride) + 1`.

use crate::layers::LayerError;
use crate::matmul::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Static geometry of one convolution. Weights are laid out row-major as
/// `[out_c × (in_c·kh·kw)]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Square-kernel constructor, the shape used by all canned networks.
    pub fn square(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        ConvGeom { in_c, out_c, kh: k, kw: k, stride, pad }
    }

    pub fn out_shape(&self, input: Shape) -> Result<Shape, LayerError> {
        if input.c != self.in_c {
            return Err(LayerError::ChannelMismatch {
                expected: self.in_c,
                found: input.c,
            });
        }
        if self.stride == 0 {
            return Err(LayerError::ZeroStride);
        }
        if self.kh == 0 || self.kw == 0 || self.kh > input.h + 2 * self.pad || self.kw > input.w + 2 * self.pad
        {
            return Err(LayerError::KernelTooLarge {
                k: self.kh.max(self.kw),
                input,
                pad: self.pad,
            });
        }
        let oh = (input.h + 2 * self.pad - self.kh) / self.stride + 1;
        let ow = (input.w + 2 * self.pad - self.kw) / self.stride + 1;
        Ok(Shape::new(self.out_c, oh, ow))
    }

    /// Length of one im2col patch row: in_c · kh · kw.
    pub fn patch_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    pub fn weight_len(&self) -> usize {
        self.out_c * self.patch_len()
    }
}

/// Unfolds the input into a `[patch_len × positions]` matrix, zero-padding
/// out-of-bounds taps.
pub fn im2col<R: Real>(x: &Tensor<R>, g: &ConvGeom, out_shape: Shape, cols: &mut [R]) {
    let (h, w) = (x.shape().h, x.shape().w);
    let (oh, ow) = (out_shape.h, out_shape.w);
    let positions = oh * ow;
    debug_assert_eq!(cols.len(), g.patch_len() * positions);
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = x.channel(c);
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * positions..(row + 1) * positions];
                row += 1;
                let mut p = 0;
                for oy in 0..oh {
                    let y = (oy * g.stride + ky) as isize - g.pad as isize;
                    if y < 0 || y >= h as isize {
                        dst[p..p + ow].fill(R::zero());
                        p += ow;
                        continue;
                    }
                    let src_row = &plane[y as usize * w..(y as usize + 1) * w];
                    for ox in 0..ow {
                        let xx = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[p] = if xx < 0 || xx >= w as isize {
                            R::zero()
                        } else {
                            src_row[xx as usize]
                        };
                        p += 1;
                    }
                }
            }
        }
    }
}

/// Folds a `[patch_len × positions]` gradient back onto the input, the
/// scatter-add adjoint of [`im2col`].
pub fn col2im_acc<R: Real>(cols: &[R], g: &ConvGeom, out_shape: Shape, grad_x: &mut Tensor<R>) {
    let (h, w) = (grad_x.shape().h, grad_x.shape().w);
    let (oh, ow) = (out_shape.h, out_shape.w);
    let positions = oh * ow;
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = grad_x.channel_mut(c);
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * positions..(row + 1) * positions];
                row += 1;
                let mut p = 0;
                for oy in 0..oh {
                    let y = (oy * g.stride + ky) as isize - g.pad as isize;
                    if y < 0 || y >= h as isize {
                        p += ow;
                        continue;
                    }
                    let dst_row = &mut plane[y as usize * w..(y as usize + 1) * w];
                    for ox in 0..ow {
                        let xx = (ox * g.stride + kx) as isize - g.pad as isize;
                        if xx >= 0 && (xx as usize) < w {
                            dst_row[xx as usize] += src[p];
                        }
                        p += 1;
                    }
                }
            }
        }
    }
}

/// Forward convolution that reuses a caller-provided im2col scratch buffer;
/// `cols` is left holding the unfolded input for the backward pass.
pub fn conv2d_forward_into<R: Real>(
    x: &Tensor<R>,
    g: &ConvGeom,
    weight: &[R],
    bias: &[R],
    cols: &mut Vec<R>,
) -> Result<Tensor<R>, LayerError> {
    let out_shape = g.out_shape(x.shape())?;
    let positions = out_shape.spatial();
    cols.clear();
    cols.resize(g.patch_len() * positions, R::zero());
    im2col(x, g, out_shape, cols);
    let mut out = Tensor::zeros(out_shape);
    for oc in 0..g.out_c {
        out.channel_mut(oc).fill(bias[oc]);
    }
    matmul_acc(out.data_mut(), weight, cols, g.out_c, g.patch_len(), positions);
    Ok(out)
}

/// Forward convolution with internal scratch; convenience entry point.
pub fn conv2d_forward<R: Real>(
    x: &Tensor<R>,
    g: &ConvGeom,
    weight: &[R],
    bias: &[R],
) -> Result<Tensor<R>, LayerError> {
    let mut cols = Vec::new();
    conv2d_forward_into(x, g, weight, bias, &mut cols)
}

/// Backward pass. `cols` must hold the forward's im2col matrix. Accumulates
/// into `grad_w` / `grad_b`, and adds the input gradient into `grad_x` when
/// provided.
pub fn conv2d_backward_acc<R: Real>(
    g: &ConvGeom,
    cols: &[R],
    weight: &[R],
    grad_out: &Tensor<R>,
    grad_w: &mut [R],
    grad_b: &mut [R],
    mut grad_x: Option<&mut Tensor<R>>,
) {
    let out_shape = grad_out.shape();
    let positions = out_shape.spatial();
    debug_assert_eq!(grad_w.len(), g.weight_len());
    debug_assert_eq!(grad_b.len(), g.out_c);
    // dW += dOut · colsᵀ
    matmul_a_bt_acc(grad_w, grad_out.data(), cols, g.out_c, positions, g.patch_len());
    // db += row sums of dOut
    for oc in 0..g.out_c {
        grad_b[oc] += grad_out.channel(oc).iter().copied().sum();
    }
    if let Some(gx) = grad_x.as_deref_mut() {
        // dcols = Wᵀ · dOut, then fold back onto the input.
        let mut dcols = vec![R::zero(); g.patch_len() * positions];
        matmul_at_b_acc(&mut dcols, weight, grad_out.data(), g.patch_len(), g.out_c, positions);
        col2im_acc(&dcols, g, out_shape, gx);
    }
}
