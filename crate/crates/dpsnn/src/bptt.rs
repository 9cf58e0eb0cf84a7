//! Forward pass over the full time window with tape recording, and
//! backpropagation through time producing one exact flat gradient per sample.
//!
//! The forward pass runs layer-major: each layer consumes the previous
//! layer's whole output sequence, so a conv block's membrane loop stays local
//! to the layer. When the sample input is constant over time, the first conv
//! block's convolution and normalization are computed once and reused at
//! every step; the membrane dynamics still unroll over all T steps.
//!
//! Backward runs layers in reverse. Within a conv block the membrane
//! recursion carries two paths per step: the spike path through the
//! triangular surrogate, and the temporal path through decay gated by
//! (1 - spike); no gradient flows through the reset indicator itself.

use thiserror::Error;

use crate::data::EncodedSample;
use crate::layers::conv::{conv2d_backward_acc, conv2d_forward_into};
use crate::layers::dense::dense_forward;
use crate::layers::norm::{group_norm_backward, group_norm_forward, NormCache};
use crate::layers::pool::{
    avg_pool_backward, avg_pool_forward, max_pool_backward, max_pool_forward,
};
use crate::layers::tep::{tep_backward, tep_forward, TepCache};
use crate::layers::LayerError;
use crate::matmul::{matvec_t_acc, outer_acc};
use crate::network::{NetworkPlan, PlannedKind, PoolMethod};
use crate::neuron::{surrogate_grad, NeuronParams};
use crate::real::{r, Real};
use crate::tensor::{Shape, Tensor};

#[derive(Error, Debug)]
pub enum BpttError {
    #[error("parameter vector length {found}, plan expects {expected}")]
    ParamLen { expected: usize, found: usize },
    #[error("input shape {found}, network expects {expected}")]
    InputShape { expected: Shape, found: Shape },
    #[error("input covers {found} time steps, network expects {expected}")]
    TimeWindow { expected: usize, found: usize },
    #[error("non-finite activation in layer {layer} at time step {t}")]
    NonFinite { layer: usize, t: usize },
    #[error("layer {layer}: {source}")]
    Layer { layer: usize, source: LayerError },
    #[error("tape has {found} layer records, plan has {expected}")]
    TapeLayers { expected: usize, found: usize },
    #[error("gradient of logits has length {found}, output layer has {expected}")]
    LogitLen { expected: usize, found: usize },
}

/// Per-sample gradient over all trainable parameters in canonical order.
#[derive(Clone, Debug)]
pub struct PerSampleGradient<R: Real> {
    pub flat: Vec<R>,
}

/// Per-layer forward state retained for the backward pass.
pub(crate) enum LayerRecord<R: Real> {
    ConvBlock {
        /// im2col matrices; a single entry when the input is constant.
        cols: Vec<Vec<R>>,
        /// Convolution outputs (normalization inputs); single when constant.
        norm_in: Vec<Tensor<R>>,
        norm_caches: Vec<NormCache>,
        /// Membrane potential at comparison time, per step.
        potentials: Vec<Vec<R>>,
        /// Spike indicators per step.
        spikes: Vec<Vec<u8>>,
        constant_input: bool,
    },
    MaxPool {
        argmax: Vec<Vec<u32>>,
    },
    AvgPool,
    Tep {
        cache: TepCache<R>,
        input_spikes: Vec<Vec<u8>>,
    },
    GlobalAvgPool,
    Dense {
        /// Sum of flattened inputs over the window.
        input_sum: Vec<R>,
    },
}

/// Everything backward needs that the forward pass computed.
pub struct Tape<R: Real> {
    pub(crate) records: Vec<LayerRecord<R>>,
    time_steps: usize,
}

fn spikes_to_tensor<R: Real>(spikes: &[u8], shape: Shape) -> Tensor<R> {
    Tensor::from_vec(
        shape,
        spikes
            .iter()
            .map(|&s| if s == 1 { R::one() } else { R::zero() })
            .collect(),
    )
}

/// Runs the network over the whole window. Returns the output layer's
/// accumulated membrane potentials (logits are potentials / T) and the tape.
pub fn forward_sample<R: Real>(
    plan: &NetworkPlan<R>,
    params: &[R],
    input: &EncodedSample<R>,
) -> Result<(Vec<R>, Tape<R>), BpttError> {
    if params.len() != plan.param_len {
        return Err(BpttError::ParamLen {
            expected: plan.param_len,
            found: params.len(),
        });
    }
    if input.shape() != plan.spec.input {
        return Err(BpttError::InputShape {
            expected: plan.spec.input,
            found: input.shape(),
        });
    }
    let t_len = plan.spec.time_steps;
    if input.time_steps() != t_len {
        return Err(BpttError::TimeWindow {
            expected: t_len,
            found: input.time_steps(),
        });
    }

    let mut records = Vec::with_capacity(plan.layers.len());
    // Output sequence of the previous layer; empty before the first layer,
    // which reads directly from the encoded sample.
    let mut current: Vec<Tensor<R>> = Vec::new();
    let mut final_potentials = Vec::new();

    for (li, layer) in plan.layers.iter().enumerate() {
        let step_input = |t: usize| -> &Tensor<R> {
            if li == 0 {
                input.at(t)
            } else {
                &current[t]
            }
        };
        let wrap = |source| BpttError::Layer { layer: li, source };
        match &layer.kind {
            PlannedKind::ConvBlock {
                geom,
                gn_groups,
                kernel,
                bias,
                gn_scale,
                gn_shift,
            } => {
                let constant_input = li == 0 && input.is_constant();
                let n_unique = if constant_input { 1 } else { t_len };
                let mut cols = Vec::with_capacity(n_unique);
                let mut norm_in = Vec::with_capacity(n_unique);
                let mut norm_caches = Vec::with_capacity(n_unique);
                let mut currents = Vec::with_capacity(n_unique);
                for s in 0..n_unique {
                    let mut cols_s = Vec::new();
                    let conv_out = conv2d_forward_into(
                        step_input(s),
                        geom,
                        &params[kernel.clone()],
                        &params[bias.clone()],
                        &mut cols_s,
                    )
                    .map_err(wrap)?;
                    let (normed, cache) = group_norm_forward(
                        &conv_out,
                        *gn_groups,
                        &params[gn_scale.clone()],
                        &params[gn_shift.clone()],
                    )
                    .map_err(wrap)?;
                    if !normed.is_finite() {
                        return Err(BpttError::NonFinite { layer: li, t: s });
                    }
                    cols.push(cols_s);
                    norm_in.push(conv_out);
                    norm_caches.push(cache);
                    currents.push(normed);
                }

                let out_len = layer.out_shape.len();
                let mut potential = vec![R::zero(); out_len];
                let mut last_spike = vec![0u8; out_len];
                let mut potentials = Vec::with_capacity(t_len);
                let mut spikes = Vec::with_capacity(t_len);
                let mut outputs = Vec::with_capacity(t_len);
                let neuron = &plan.neuron;
                for t in 0..t_len {
                    let i_t = &currents[if constant_input { 0 } else { t }];
                    crate::neuron::step_unchecked(
                        &mut potential,
                        &mut last_spike,
                        i_t.data(),
                        neuron.decay(),
                        neuron.input_scale(),
                        neuron.threshold,
                    );
                    potentials.push(potential.clone());
                    spikes.push(last_spike.clone());
                    outputs.push(spikes_to_tensor(&last_spike, layer.out_shape));
                }
                current = outputs;
                records.push(LayerRecord::ConvBlock {
                    cols,
                    norm_in,
                    norm_caches,
                    potentials,
                    spikes,
                    constant_input,
                });
            }
            PlannedKind::Pool { method, kernel, stride } => match method {
                PoolMethod::Max => {
                    let mut outs = Vec::with_capacity(t_len);
                    let mut argmax = Vec::with_capacity(t_len);
                    for t in 0..t_len {
                        let (y, arg) =
                            max_pool_forward(step_input(t), *kernel, *stride).map_err(wrap)?;
                        outs.push(y);
                        argmax.push(arg);
                    }
                    current = outs;
                    records.push(LayerRecord::MaxPool { argmax });
                }
                PoolMethod::Avg => {
                    let mut outs = Vec::with_capacity(t_len);
                    for t in 0..t_len {
                        outs.push(
                            avg_pool_forward(step_input(t), *kernel, *stride).map_err(wrap)?,
                        );
                    }
                    current = outs;
                    records.push(LayerRecord::AvgPool);
                }
                PoolMethod::Tep => {
                    // The planner guarantees a conv block precedes, so the
                    // inputs are spike maps and pack losslessly into bytes.
                    let (outs, cache) = tep_forward(&current, *kernel, *stride).map_err(wrap)?;
                    let input_spikes = current
                        .iter()
                        .map(|m| {
                            m.data()
                                .iter()
                                .map(|&v| u8::from(v != R::zero()))
                                .collect()
                        })
                        .collect();
                    current = outs;
                    records.push(LayerRecord::Tep { cache, input_spikes });
                }
            },
            PlannedKind::GlobalAvgPool => {
                let sp = layer.in_shape.spatial();
                let inv = r::<R>(1.0 / sp as f64);
                let mut outs = Vec::with_capacity(t_len);
                for t in 0..t_len {
                    let x = step_input(t);
                    let mut y = Tensor::zeros(layer.out_shape);
                    for c in 0..layer.in_shape.c {
                        y.data_mut()[c] = x.channel(c).iter().copied().sum::<R>() * inv;
                    }
                    outs.push(y);
                }
                current = outs;
                records.push(LayerRecord::GlobalAvgPool);
            }
            PlannedKind::Dense { weight, bias, in_dim, out_dim } => {
                let mut acc = vec![R::zero(); *out_dim];
                let mut input_sum = vec![R::zero(); *in_dim];
                for t in 0..t_len {
                    let x = step_input(t).data();
                    let y = dense_forward(&params[weight.clone()], &params[bias.clone()], x)
                        .map_err(wrap)?;
                    for (a, v) in acc.iter_mut().zip(&y) {
                        *a += *v;
                    }
                    for (s, v) in input_sum.iter_mut().zip(x) {
                        *s += *v;
                    }
                    if !acc.iter().all(|v| v.is_finite()) {
                        return Err(BpttError::NonFinite { layer: li, t });
                    }
                }
                final_potentials = acc;
                records.push(LayerRecord::Dense { input_sum });
            }
        }
    }

    Ok((final_potentials, Tape { records, time_steps: t_len }))
}

/// Forward pass without tape recording, for evaluation. Returns logits
/// (accumulated potentials divided by T).
pub fn forward_logits<R: Real>(
    plan: &NetworkPlan<R>,
    params: &[R],
    input: &EncodedSample<R>,
) -> Result<Vec<R>, BpttError> {
    // Tape overhead is a bounded constant factor; evaluation reuses the
    // instrumented path and discards the tape.
    let (potentials, _) = forward_sample(plan, params, input)?;
    let inv_t = r::<R>(1.0 / plan.spec.time_steps as f64);
    Ok(potentials.into_iter().map(|v| v * inv_t).collect())
}

/// Membrane backward over one conv block's time window: combines the spike
/// path (surrogate) with the decay carry gated by (1 - spike), returning the
/// gradient with respect to each step's input current.
pub(crate) fn membrane_backward<R: Real>(
    potentials: &[Vec<R>],
    spikes: &[Vec<u8>],
    grad_out: &[Tensor<R>],
    neuron: &NeuronParams<R>,
) -> Vec<Vec<R>> {
    let t_len = potentials.len();
    let width = potentials[0].len();
    let decay = neuron.decay();
    let input_scale = neuron.input_scale();
    let mut grad_v = vec![R::zero(); width];
    let mut grad_i = vec![Vec::new(); t_len];
    for t in (0..t_len).rev() {
        let go = grad_out[t].data();
        let v_t = &potentials[t];
        let o_t = &spikes[t];
        let mut gi_t = vec![R::zero(); width];
        for i in 0..width {
            let spike_path = go[i] * surrogate_grad(v_t[i], neuron);
            let carry = if o_t[i] == 1 {
                R::zero()
            } else {
                grad_v[i] * decay
            };
            let gv = spike_path + carry;
            grad_v[i] = gv;
            gi_t[i] = gv * input_scale;
        }
        grad_i[t] = gi_t;
    }
    grad_i
}

/// Exact gradient of the whole forward pass with respect to all parameters,
/// given the loss gradient at the logits.
pub fn backward_sample<R: Real>(
    plan: &NetworkPlan<R>,
    params: &[R],
    tape: &Tape<R>,
    grad_logits: &[R],
) -> Result<PerSampleGradient<R>, BpttError> {
    if params.len() != plan.param_len {
        return Err(BpttError::ParamLen {
            expected: plan.param_len,
            found: params.len(),
        });
    }
    if tape.records.len() != plan.layers.len() {
        return Err(BpttError::TapeLayers {
            expected: plan.layers.len(),
            found: tape.records.len(),
        });
    }
    let t_len = tape.time_steps;
    let mut flat = vec![R::zero(); plan.param_len];
    // Gradient flowing upstream, one tensor per time step.
    let mut gseq: Vec<Tensor<R>> = Vec::new();

    for (li, (layer, record)) in plan.layers.iter().zip(&tape.records).enumerate().rev() {
        match (&layer.kind, record) {
            (
                PlannedKind::Dense { weight, bias, in_dim, out_dim },
                LayerRecord::Dense { input_sum },
            ) => {
                if grad_logits.len() != *out_dim {
                    return Err(BpttError::LogitLen {
                        expected: *out_dim,
                        found: grad_logits.len(),
                    });
                }
                // Potentials accumulate T affine maps and logits divide by
                // T, so each step sees grad_logits / T.
                let inv_t = r::<R>(1.0 / t_len as f64);
                let gl: Vec<R> = grad_logits.iter().map(|&g| g * inv_t).collect();
                outer_acc(&mut flat[weight.clone()], &gl, input_sum, *out_dim, *in_dim);
                for (gb, &g) in flat[bias.clone()].iter_mut().zip(grad_logits) {
                    *gb += g;
                }
                if li > 0 {
                    let mut gx = vec![R::zero(); *in_dim];
                    matvec_t_acc(&mut gx, &params[weight.clone()], &gl, *out_dim, *in_dim);
                    let gx = Tensor::from_vec(layer.in_shape, gx);
                    gseq = vec![gx; t_len];
                }
            }
            (PlannedKind::Pool { .. }, LayerRecord::MaxPool { argmax }) => {
                for (t, g) in gseq.iter_mut().enumerate() {
                    *g = max_pool_backward(layer.in_shape, &argmax[t], g);
                }
            }
            (PlannedKind::Pool { kernel, stride, .. }, LayerRecord::AvgPool) => {
                for g in gseq.iter_mut() {
                    *g = avg_pool_backward(layer.in_shape, *kernel, *stride, g);
                }
            }
            (
                PlannedKind::Pool { kernel, stride, .. },
                LayerRecord::Tep { cache, input_spikes },
            ) => {
                let spikes: Vec<Tensor<R>> = input_spikes
                    .iter()
                    .map(|s| spikes_to_tensor(s, layer.in_shape))
                    .collect();
                gseq = tep_backward(&spikes, cache, &gseq, *kernel, *stride)
                    .map_err(|source| BpttError::Layer { layer: li, source })?;
            }
            (PlannedKind::GlobalAvgPool, LayerRecord::GlobalAvgPool) => {
                let sp = layer.in_shape.spatial();
                let inv = r::<R>(1.0 / sp as f64);
                for g in gseq.iter_mut() {
                    let mut gx = Tensor::zeros(layer.in_shape);
                    for c in 0..layer.in_shape.c {
                        let gc = g.data()[c] * inv;
                        gx.channel_mut(c).fill(gc);
                    }
                    *g = gx;
                }
            }
            (
                PlannedKind::ConvBlock { geom, kernel, bias, gn_scale, gn_shift, .. },
                LayerRecord::ConvBlock {
                    cols,
                    norm_in,
                    norm_caches,
                    potentials,
                    spikes,
                    constant_input,
                },
            ) => {
                let grad_i = membrane_backward(potentials, spikes, &gseq, &plan.neuron);
                let gamma = &params[gn_scale.clone()];
                let need_gx = li > 0;
                let mut upstream = Vec::with_capacity(if need_gx { t_len } else { 0 });
                let mut gg = vec![R::zero(); gamma.len()];
                let mut gsh = vec![R::zero(); gamma.len()];
                if *constant_input {
                    // Conv and normalization saw one shared input; both are
                    // linear in the upstream gradient, so the per-step
                    // gradients sum before a single backward through each.
                    let mut gi_sum = grad_i[0].clone();
                    for gi in &grad_i[1..] {
                        accumulate(&mut gi_sum, gi);
                    }
                    let gi_sum = Tensor::from_vec(norm_in[0].shape(), gi_sum);
                    let gconv = group_norm_backward(
                        &norm_in[0],
                        &norm_caches[0],
                        gamma,
                        &gi_sum,
                        &mut gg,
                        &mut gsh,
                    );
                    let (gw, gb) = split_two(&mut flat, kernel, bias);
                    conv2d_backward_acc(geom, &cols[0], &params[kernel.clone()], &gconv, gw, gb, None);
                } else {
                    for t in 0..t_len {
                        let gi_t = Tensor::from_vec(norm_in[t].shape(), grad_i[t].clone());
                        let gconv = group_norm_backward(
                            &norm_in[t],
                            &norm_caches[t],
                            gamma,
                            &gi_t,
                            &mut gg,
                            &mut gsh,
                        );
                        let (gw, gb) = split_two(&mut flat, kernel, bias);
                        let mut gx = Tensor::zeros(layer.in_shape);
                        let gx_slot = need_gx.then_some(&mut gx);
                        conv2d_backward_acc(
                            geom,
                            &cols[t],
                            &params[kernel.clone()],
                            &gconv,
                            gw,
                            gb,
                            gx_slot,
                        );
                        if need_gx {
                            upstream.push(gx);
                        }
                    }
                }
                accumulate(&mut flat[gn_scale.clone()], &gg);
                accumulate(&mut flat[gn_shift.clone()], &gsh);
                gseq = upstream;
            }
            _ => unreachable!("tape layout follows the plan that produced it"),
        }
    }

    Ok(PerSampleGradient { flat })
}

fn accumulate<R: Real>(dst: &mut [R], src: &[R]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Two disjoint mutable parameter slices out of the flat gradient.
fn split_two<'a, R: Real>(
    flat: &'a mut [R],
    a: &std::ops::Range<usize>,
    b: &std::ops::Range<usize>,
) -> (&'a mut [R], &'a mut [R]) {
    debug_assert!(a.end <= b.start);
    let (head, tail) = flat.split_at_mut(b.start);
    (&mut head[a.clone()], &mut tail[..b.end - b.start])
}

/// Mean spike rate per conv block, in layer order: fraction of (neuron,
/// step) pairs that fired. Diagnoses too-sparse or too-dense spiking.
pub fn mean_fire_rates<R: Real>(tape: &Tape<R>) -> Vec<f64> {
    tape.records
        .iter()
        .filter_map(|rec| match rec {
            LayerRecord::ConvBlock { spikes, .. } => {
                let total: usize = spikes.iter().map(|s| s.len()).sum();
                let fired: usize = spikes
                    .iter()
                    .map(|s| s.iter().map(|&b| b as usize).sum::<usize>())
                    .sum();
                Some(fired as f64 / total as f64)
            }
            _ => None,
        })
        .collect()
}
