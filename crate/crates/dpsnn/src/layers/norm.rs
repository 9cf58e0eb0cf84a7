//! Group normalization (learnable per-channel affine) and instance
//! normalization (no affine), with exact hand-derived backward passes.
//!
//! Statistics are accumulated in f64 regardless of the engine scalar so that
//! groups of identical values normalize to exactly zero up to one rounding,
//! which downstream temporal pooling relies on.

use crate::layers::LayerError;
use crate::real::{r, Real};
use crate::tensor::Tensor;

/// Variance stabilizer inside both normalizations.
pub const NORM_EPS: f64 = 1e-5;

/// Per-group statistics saved by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct NormCache {
    pub mean: Vec<f64>,
    pub invstd: Vec<f64>,
    pub groups: usize,
}

fn group_stats<R: Real>(x: &Tensor<R>, groups: usize) -> NormCache {
    let group_len = x.data().len() / groups;
    let mut mean = Vec::with_capacity(groups);
    let mut invstd = Vec::with_capacity(groups);
    for g in 0..groups {
        let xs = &x.data()[g * group_len..(g + 1) * group_len];
        let m = xs.iter().map(|v| v.as_f64()).sum::<f64>() / group_len as f64;
        let var = xs
            .iter()
            .map(|v| {
                let d = v.as_f64() - m;
                d * d
            })
            .sum::<f64>()
            / group_len as f64;
        mean.push(m);
        invstd.push(1.0 / (var + NORM_EPS).sqrt());
    }
    NormCache { mean, invstd, groups }
}

/// Group normalization: per-group zero-mean unit-variance over
/// (channels-in-group, H, W), then per-channel scale and shift.
pub fn group_norm_forward<R: Real>(
    x: &Tensor<R>,
    groups: usize,
    gamma: &[R],
    beta: &[R],
) -> Result<(Tensor<R>, NormCache), LayerError> {
    let c = x.shape().c;
    if groups == 0 || c % groups != 0 {
        return Err(LayerError::GroupDivisibility { channels: c, groups });
    }
    if gamma.len() != c || beta.len() != c {
        return Err(LayerError::WidthMismatch {
            expected: c,
            found: gamma.len().min(beta.len()),
        });
    }
    let cache = group_stats(x, groups);
    let mut y = Tensor::zeros(x.shape());
    let ch_per_group = c / groups;
    let sp = x.shape().spatial();
    for ch in 0..c {
        let g = ch / ch_per_group;
        let (m, is) = (r::<R>(cache.mean[g]), r::<R>(cache.invstd[g]));
        let (ga, be) = (gamma[ch], beta[ch]);
        let src = x.channel(ch);
        let dst = &mut y.data_mut()[ch * sp..(ch + 1) * sp];
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = ga * ((s - m) * is) + be;
        }
    }
    Ok((y, cache))
}

/// Exact gradient of [`group_norm_forward`]. Adds the parameter gradients
/// into `grad_gamma` / `grad_beta` and returns the input gradient.
///
/// Per group, with x̂ the normalized values and n the group size:
/// `dx = invstd · (dx̂ − mean(dx̂) − x̂ · mean(dx̂ ⊙ x̂))`, `dx̂ = dy · γ`.
pub fn group_norm_backward<R: Real>(
    x: &Tensor<R>,
    cache: &NormCache,
    gamma: &[R],
    grad_y: &Tensor<R>,
    grad_gamma: &mut [R],
    grad_beta: &mut [R],
) -> Tensor<R> {
    let c = x.shape().c;
    let ch_per_group = c / cache.groups;
    let sp = x.shape().spatial();

    // Per-channel parameter gradients.
    for ch in 0..c {
        let g = ch / ch_per_group;
        let (m, is) = (cache.mean[g], cache.invstd[g]);
        let mut dg = 0.0f64;
        let mut db = 0.0f64;
        for (&xv, &dyv) in x.channel(ch).iter().zip(grad_y.channel(ch)) {
            let xhat = (xv.as_f64() - m) * is;
            dg += dyv.as_f64() * xhat;
            db += dyv.as_f64();
        }
        grad_gamma[ch] += r(dg);
        grad_beta[ch] += r(db);
    }

    // Input gradient, group by group.
    let mut gx = Tensor::zeros(x.shape());
    let group_len = (ch_per_group * sp) as f64;
    for g in 0..cache.groups {
        let (m, is) = (cache.mean[g], cache.invstd[g]);
        let mut sum_dxhat = 0.0f64;
        let mut sum_dxhat_xhat = 0.0f64;
        for ch in g * ch_per_group..(g + 1) * ch_per_group {
            for (&xv, &dyv) in x.channel(ch).iter().zip(grad_y.channel(ch)) {
                let xhat = (xv.as_f64() - m) * is;
                let dxhat = dyv.as_f64() * gamma[ch].as_f64();
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
        }
        let mean_dxhat = sum_dxhat / group_len;
        let mean_dxhat_xhat = sum_dxhat_xhat / group_len;
        for ch in g * ch_per_group..(g + 1) * ch_per_group {
            let xs = x.channel(ch);
            let dys = grad_y.channel(ch);
            let dst = &mut gx.data_mut()[ch * sp..(ch + 1) * sp];
            let gamma_ch = gamma[ch].as_f64();
            for i in 0..sp {
                let xhat = (xs[i].as_f64() - m) * is;
                let dxhat = dys[i].as_f64() * gamma_ch;
                dst[i] = r(is * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat));
            }
        }
    }
    gx
}

/// Instance normalization: per-channel normalization over (H, W) with no
/// learnable affine, i.e. group normalization with one group per channel
/// and unit scale.
pub fn instance_norm_forward<R: Real>(x: &Tensor<R>) -> (Tensor<R>, NormCache) {
    let c = x.shape().c;
    let cache = group_stats(x, c);
    let mut y = Tensor::zeros(x.shape());
    let sp = x.shape().spatial();
    for ch in 0..c {
        let (m, is) = (r::<R>(cache.mean[ch]), r::<R>(cache.invstd[ch]));
        let src = x.channel(ch);
        let dst = &mut y.data_mut()[ch * sp..(ch + 1) * sp];
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - m) * is;
        }
    }
    (y, cache)
}

/// Exact gradient of [`instance_norm_forward`].
pub fn instance_norm_backward<R: Real>(
    x: &Tensor<R>,
    cache: &NormCache,
    grad_y: &Tensor<R>,
) -> Tensor<R> {
    let c = x.shape().c;
    let sp = x.shape().spatial();
    let mut gx = Tensor::zeros(x.shape());
    for ch in 0..c {
        let (m, is) = (cache.mean[ch], cache.invstd[ch]);
        let xs = x.channel(ch);
        let dys = grad_y.channel(ch);
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for i in 0..sp {
            let xhat = (xs[i].as_f64() - m) * is;
            sum_dy += dys[i].as_f64();
            sum_dy_xhat += dys[i].as_f64() * xhat;
        }
        let mean_dy = sum_dy / sp as f64;
        let mean_dy_xhat = sum_dy_xhat / sp as f64;
        let dst = &mut gx.data_mut()[ch * sp..(ch + 1) * sp];
        for i in 0..sp {
            let xhat = (xs[i].as_f64() - m) * is;
            dst[i] = r(is * (dys[i].as_f64() - mean_dy - xhat * mean_dy_xhat));
        }
    }
    gx
}
