//! Differentially private optimization: per-sample gradient clipping,
//! Gaussian noising of the aggregated batch gradient, and an AdamW update
//! on the noisy mean.
//!
//! Norms and noise are computed in f64 regardless of the engine scalar, and
//! clipping re-checks the post-scale norm so that clipping is exactly
//! idempotent: a clipped vector passes through a second clip untouched.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::bptt::PerSampleGradient;
use crate::real::{r, Real};

#[derive(Error, Debug, PartialEq)]
pub enum DpError {
    #[error("clip bound must be positive, got {0}")]
    ClipBoundNotPositive(f64),
    #[error("noise scale must be nonnegative, got {0}")]
    NoiseScaleNegative(f64),
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
    #[error("non-finite gradient entry at index {index}")]
    NonFiniteGradient { index: usize },
    #[error("sample {index} has norm {norm} above the clip bound {bound}")]
    UnclippedInput { index: usize, norm: f64, bound: f64 },
    #[error("vector length {found} does not match parameter count {expected}")]
    LengthMismatch { expected: usize, found: usize },
}

/// Privacy-relevant update settings. `clip_bound` may be infinite to
/// disable clipping for non-private baselines (only sensible with zero
/// noise); `batch_size` is the configured B used as the mean divisor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpConfig {
    pub clip_bound: f64,
    pub noise_scale: f64,
    pub batch_size: usize,
}

impl DpConfig {
    pub fn new(clip_bound: f64, noise_scale: f64, batch_size: usize) -> Result<Self, DpError> {
        if !(clip_bound > 0.0) {
            return Err(DpError::ClipBoundNotPositive(clip_bound));
        }
        if !(noise_scale >= 0.0) {
            return Err(DpError::NoiseScaleNegative(noise_scale));
        }
        if batch_size == 0 {
            return Err(DpError::ZeroBatchSize);
        }
        Ok(DpConfig { clip_bound, noise_scale, batch_size })
    }
}

/// Euclidean norm accumulated in f64.
pub fn l2_norm<R: Real>(g: &[R]) -> f64 {
    g.iter()
        .map(|&v| {
            let x = v.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Scales the gradient to `g / max(1, ||g||/bound)` in place. Vectors at or
/// below the bound pass through bit-identically; scaled vectors are
/// re-checked and nudged down so the post-clip norm never exceeds the bound,
/// making the operation exactly idempotent.
pub fn clip_gradient<R: Real>(
    g: &mut PerSampleGradient<R>,
    bound: f64,
) -> Result<(), DpError> {
    if !(bound > 0.0) {
        return Err(DpError::ClipBoundNotPositive(bound));
    }
    if let Some(index) = g.flat.iter().position(|v| !v.is_finite()) {
        return Err(DpError::NonFiniteGradient { index });
    }
    for _ in 0..8 {
        let norm = l2_norm(&g.flat);
        if norm <= bound {
            return Ok(());
        }
        let mut scale = r::<R>(bound / norm);
        if scale >= R::one() {
            // The overshoot is below one scalar ulp, so the exact ratio
            // rounds to 1 and would stall; 1 - eps strictly shrinks every
            // normal element.
            scale = R::one() - R::epsilon();
        }
        for v in &mut g.flat {
            *v *= scale;
        }
    }
    // One real rescale plus up to seven ulp-level trims always lands at or
    // below the bound.
    debug_assert!(l2_norm(&g.flat) <= bound);
    Ok(())
}

/// Sums the clipped per-sample gradients and adds one fresh Gaussian draw
/// per coordinate with standard deviation `noise_scale * clip_bound`.
/// Inputs above the clip bound (beyond 1e-6 slack) are a contract violation.
pub fn aggregate_and_noise<R: Real, G: Rng + ?Sized>(
    clipped: &[PerSampleGradient<R>],
    width: usize,
    cfg: &DpConfig,
    rng: &mut G,
) -> Result<Vec<R>, DpError> {
    let mut sum = vec![0.0f64; width];
    for (index, g) in clipped.iter().enumerate() {
        if g.flat.len() != width {
            return Err(DpError::LengthMismatch { expected: width, found: g.flat.len() });
        }
        let norm = l2_norm(&g.flat);
        if norm > cfg.clip_bound + 1e-6 {
            return Err(DpError::UnclippedInput { index, norm, bound: cfg.clip_bound });
        }
        for (acc, &v) in sum.iter_mut().zip(&g.flat) {
            *acc += v.as_f64();
        }
    }
    if cfg.noise_scale > 0.0 {
        let sd = cfg.noise_scale * cfg.clip_bound;
        for acc in &mut sum {
            let z: f64 = rng.sample(StandardNormal);
            *acc += sd * z;
        }
    }
    Ok(sum.into_iter().map(r).collect())
}

/// AdamW state: first/second moments plus the shared hyperparameters.
#[derive(Clone, Debug)]
pub struct OptimizerState<R: Real> {
    pub m: Vec<R>,
    pub v: Vec<R>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<R: Real> OptimizerState<R> {
    /// Fresh state with conventional defaults (beta 0.9/0.999, eps 1e-8,
    /// weight decay 0.01).
    pub fn new(param_len: usize, learning_rate: f64) -> Self {
        OptimizerState {
            m: vec![R::zero(); param_len],
            v: vec![R::zero(); param_len],
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One AdamW step on the noisy sum `u`: the gradient estimate is `u / B`,
/// decoupled weight decay multiplies parameters by (1 - lr*wd) first, then
/// the bias-corrected moment update applies.
pub fn adamw_update<R: Real>(
    params: &mut [R],
    u: &[R],
    cfg: &DpConfig,
    state: &mut OptimizerState<R>,
) -> Result<(), DpError> {
    if u.len() != params.len() {
        return Err(DpError::LengthMismatch { expected: params.len(), found: u.len() });
    }
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(DpError::LengthMismatch { expected: params.len(), found: state.m.len() });
    }
    state.step += 1;
    let t = state.step as i32;
    let lr = state.learning_rate;
    let (b1, b2) = (state.beta1, state.beta2);
    let inv_b = 1.0 / cfg.batch_size as f64;
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);
    let decay = r::<R>(1.0 - lr * state.weight_decay);
    let (rb1, rb2) = (r::<R>(b1), r::<R>(b2));
    let (c1, c2) = (r::<R>(1.0 - b1), r::<R>(1.0 - b2));
    let step_scale = r::<R>(lr / bias1);
    let vhat_scale = r::<R>(1.0 / bias2);
    let eps = r::<R>(state.eps);
    let g_scale = r::<R>(inv_b);
    for i in 0..params.len() {
        let g = u[i] * g_scale;
        params[i] *= decay;
        state.m[i] = rb1 * state.m[i] + c1 * g;
        state.v[i] = rb2 * state.v[i] + c2 * g * g;
        let denom = (state.v[i] * vhat_scale).sqrt() + eps;
        params[i] -= step_scale * state.m[i] / denom;
    }
    Ok(())
}
