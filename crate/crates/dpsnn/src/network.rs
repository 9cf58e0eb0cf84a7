//! Network topology: declarative layer lists, shape planning, canonical
//! parameter layout, initialization, and a text descriptor that round-trips
//! so checkpoints can rebuild the exact architecture they were trained with.

use std::fmt::Write as _;
use std::ops::Range;

use rand::Rng;
use thiserror::Error;

use crate::layers::conv::ConvGeom;
use crate::layers::pool::pool_out_shape;
use crate::layers::LayerError;
use crate::neuron::{NeuronKind, NeuronParams};
use crate::real::{r, Real};
use crate::tensor::Shape;

/// Spatial downsampling flavor used between convolution blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMethod {
    Max,
    Avg,
    /// Temporal enhanced pooling: fire-rate-weighted average pooling.
    Tep,
}

impl PoolMethod {
    pub fn name(self) -> &'static str {
        match self {
            PoolMethod::Max => "max",
            PoolMethod::Avg => "avg",
            PoolMethod::Tep => "tep",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    /// Convolution + group normalization + spiking neurons.
    ConvBlock {
        out_channels: usize,
        kernel: usize,
        pad: usize,
        stride: usize,
        gn_groups: usize,
    },
    Pool {
        method: PoolMethod,
        kernel: usize,
        stride: usize,
    },
    /// Spatial mean per channel, per time step.
    GlobalAvgPool,
    /// Output layer: accumulates membrane potential without firing.
    Dense { out: usize },
}

/// Declarative architecture plus the temporal window and neuron model.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub input: Shape,
    pub time_steps: usize,
    pub neuron: NeuronParams<f64>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Error, Debug, PartialEq)]
pub enum PlanError {
    #[error("network has no layers")]
    EmptyNetwork,
    #[error("layer {index} ({kind}): {source}")]
    Layer {
        index: usize,
        kind: &'static str,
        source: LayerError,
    },
    #[error("final layer must be a dense output layer")]
    MissingDenseOutput,
    #[error("dense layer at position {index} is not last")]
    DenseNotLast { index: usize },
    #[error("temporal enhanced pooling at position {index} must follow a conv block")]
    TepNeedsSpikes { index: usize },
    #[error("time window must have at least one step")]
    NoTimeSteps,
    #[error("cannot parse descriptor: {0}")]
    Descriptor(String),
}

/// A layer with its resolved shapes and parameter slots.
#[derive(Clone, Debug)]
pub struct PlannedLayer {
    pub in_shape: Shape,
    pub out_shape: Shape,
    pub kind: PlannedKind,
}

#[derive(Clone, Debug)]
pub enum PlannedKind {
    ConvBlock {
        geom: ConvGeom,
        gn_groups: usize,
        kernel: Range<usize>,
        bias: Range<usize>,
        gn_scale: Range<usize>,
        gn_shift: Range<usize>,
    },
    Pool {
        method: PoolMethod,
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Dense {
        weight: Range<usize>,
        bias: Range<usize>,
        in_dim: usize,
        out_dim: usize,
    },
}

/// Fully resolved network: shapes chained, parameters laid out in one flat
/// vector in layer order, convolution blocks as (kernel, bias, scale, shift).
#[derive(Clone, Debug)]
pub struct NetworkPlan<R: Real> {
    pub spec: NetworkSpec,
    pub layers: Vec<PlannedLayer>,
    pub param_len: usize,
    pub neuron: NeuronParams<R>,
}

impl NetworkSpec {
    /// Resolves shapes and the canonical flat parameter layout, validating
    /// the whole chain.
    pub fn plan<R: Real>(&self) -> Result<NetworkPlan<R>, PlanError> {
        if self.layers.is_empty() {
            return Err(PlanError::EmptyNetwork);
        }
        if self.time_steps == 0 {
            return Err(PlanError::NoTimeSteps);
        }
        let mut planned = Vec::with_capacity(self.layers.len());
        let mut shape = self.input;
        let mut offset = 0usize;
        let last = self.layers.len() - 1;
        for (index, layer) in self.layers.iter().enumerate() {
            let (kind, out_shape) = match *layer {
                LayerSpec::ConvBlock {
                    out_channels,
                    kernel,
                    pad,
                    stride,
                    gn_groups,
                } => {
                    if gn_groups == 0 || out_channels % gn_groups != 0 {
                        return Err(PlanError::Layer {
                            index,
                            kind: "conv block",
                            source: LayerError::GroupDivisibility {
                                channels: out_channels,
                                groups: gn_groups,
                            },
                        });
                    }
                    let geom = ConvGeom::square(shape.c, out_channels, kernel, stride, pad);
                    let out = geom.out_shape(shape).map_err(|source| PlanError::Layer {
                        index,
                        kind: "conv block",
                        source,
                    })?;
                    let kernel_range = offset..offset + geom.weight_len();
                    let bias = kernel_range.end..kernel_range.end + out_channels;
                    let gn_scale = bias.end..bias.end + out_channels;
                    let gn_shift = gn_scale.end..gn_scale.end + out_channels;
                    offset = gn_shift.end;
                    (
                        PlannedKind::ConvBlock {
                            geom,
                            gn_groups,
                            kernel: kernel_range,
                            bias,
                            gn_scale,
                            gn_shift,
                        },
                        out,
                    )
                }
                LayerSpec::Pool { method, kernel, stride } => {
                    // TEP consumes spike trains; require a spiking producer
                    // so its recorded inputs are genuinely binary.
                    if method == PoolMethod::Tep
                        && !matches!(
                            index.checked_sub(1).map(|i| &self.layers[i]),
                            Some(LayerSpec::ConvBlock { .. })
                        )
                    {
                        return Err(PlanError::TepNeedsSpikes { index });
                    }
                    let out = pool_out_shape(shape, kernel, stride).map_err(|source| {
                        PlanError::Layer { index, kind: "pool", source }
                    })?;
                    (PlannedKind::Pool { method, kernel, stride }, out)
                }
                LayerSpec::GlobalAvgPool => {
                    (PlannedKind::GlobalAvgPool, Shape::new(shape.c, 1, 1))
                }
                LayerSpec::Dense { out } => {
                    if index != last {
                        return Err(PlanError::DenseNotLast { index });
                    }
                    let in_dim = shape.len();
                    let weight = offset..offset + out * in_dim;
                    let bias = weight.end..weight.end + out;
                    offset = bias.end;
                    (
                        PlannedKind::Dense { weight, bias, in_dim, out_dim: out },
                        Shape::new(out, 1, 1),
                    )
                }
            };
            planned.push(PlannedLayer { in_shape: shape, out_shape, kind });
            shape = out_shape;
        }
        if !matches!(self.layers[last], LayerSpec::Dense { .. }) {
            return Err(PlanError::MissingDenseOutput);
        }
        Ok(NetworkPlan {
            spec: self.clone(),
            layers: planned,
            param_len: offset,
            neuron: self.neuron.cast::<R>(),
        })
    }

    /// Canonical one-line text form; [`NetworkSpec::from_descriptor`] parses
    /// it back. Stored in checkpoints so evaluation can rebuild the net.
    pub fn descriptor(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "v1;in={};T={}", self.input, self.time_steps);
        match self.neuron.kind {
            NeuronKind::Lif => {
                let _ = write!(s, ";lif({},{})", self.neuron.leak_rate, self.neuron.threshold);
            }
            NeuronKind::If => {
                let _ = write!(s, ";if({})", self.neuron.threshold);
            }
        }
        for layer in &self.layers {
            match *layer {
                LayerSpec::ConvBlock { out_channels, kernel, pad, stride, gn_groups } => {
                    let _ = write!(s, ";cb({out_channels},{kernel},{pad},{stride},{gn_groups})");
                }
                LayerSpec::Pool { method, kernel, stride } => {
                    let _ = write!(s, ";pool({},{kernel},{stride})", method.name());
                }
                LayerSpec::GlobalAvgPool => s.push_str(";gap"),
                LayerSpec::Dense { out } => {
                    let _ = write!(s, ";fc({out})");
                }
            }
        }
        s
    }

    pub fn from_descriptor(text: &str) -> Result<Self, PlanError> {
        let bad = |msg: &str| PlanError::Descriptor(msg.to_string());
        let mut parts = text.split(';');
        if parts.next() != Some("v1") {
            return Err(bad("unknown version tag"));
        }
        let in_part = parts.next().ok_or_else(|| bad("missing input shape"))?;
        let input = in_part
            .strip_prefix("in=")
            .and_then(parse_shape)
            .ok_or_else(|| bad("malformed input shape"))?;
        let t_part = parts.next().ok_or_else(|| bad("missing time steps"))?;
        let time_steps: usize = t_part
            .strip_prefix("T=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("malformed time steps"))?;
        let neuron_part = parts.next().ok_or_else(|| bad("missing neuron"))?;
        let neuron = parse_neuron(neuron_part).ok_or_else(|| bad("malformed neuron"))?;
        let mut layers = Vec::new();
        for part in parts {
            layers.push(parse_layer(part).ok_or_else(|| {
                PlanError::Descriptor(format!("malformed layer entry {part:?}"))
            })?);
        }
        Ok(NetworkSpec { input, time_steps, neuron, layers })
    }
}

fn parse_shape(s: &str) -> Option<Shape> {
    let mut it = s.split('x').map(|v| v.parse::<usize>().ok());
    let shape = Shape::new(it.next()??, it.next()??, it.next()??);
    it.next().is_none().then_some(shape)
}

fn parse_args<'a>(s: &'a str, name: &str) -> Option<Vec<&'a str>> {
    let inner = s.strip_prefix(name)?.strip_prefix('(')?.strip_suffix(')')?;
    Some(inner.split(',').collect())
}

fn parse_neuron(s: &str) -> Option<NeuronParams<f64>> {
    if let Some(args) = parse_args(s, "lif") {
        let [leak, th] = args[..] else { return None };
        return NeuronParams::lif(leak.parse().ok()?, th.parse().ok()?).ok();
    }
    if let Some(args) = parse_args(s, "if") {
        let [th] = args[..] else { return None };
        return NeuronParams::integrate_fire(th.parse().ok()?).ok();
    }
    None
}

fn parse_layer(s: &str) -> Option<LayerSpec> {
    if s == "gap" {
        return Some(LayerSpec::GlobalAvgPool);
    }
    if let Some(args) = parse_args(s, "cb") {
        let [oc, k, p, st, g] = args[..] else { return None };
        return Some(LayerSpec::ConvBlock {
            out_channels: oc.parse().ok()?,
            kernel: k.parse().ok()?,
            pad: p.parse().ok()?,
            stride: st.parse().ok()?,
            gn_groups: g.parse().ok()?,
        });
    }
    if let Some(args) = parse_args(s, "pool") {
        let [m, k, st] = args[..] else { return None };
        let method = match m {
            "max" => PoolMethod::Max,
            "avg" => PoolMethod::Avg,
            "tep" => PoolMethod::Tep,
            _ => return None,
        };
        return Some(LayerSpec::Pool {
            method,
            kernel: k.parse().ok()?,
            stride: st.parse().ok()?,
        });
    }
    if let Some(args) = parse_args(s, "fc") {
        let [out] = args[..] else { return None };
        return Some(LayerSpec::Dense { out: out.parse().ok()? });
    }
    None
}

/// Small net for 28x28 single-channel images:
/// CB(32,k7,p0) -> pool2/2 -> CB(64,k4,p0) -> pool2/2 -> flatten -> FC(10).
/// Spatial chain: 28 -> 22 -> 11 -> 8 -> 4.
pub fn mnist_small(pool: PoolMethod, neuron: NeuronParams<f64>, time_steps: usize) -> NetworkSpec {
    NetworkSpec {
        input: Shape::new(1, 28, 28),
        time_steps,
        neuron,
        layers: vec![
            LayerSpec::ConvBlock { out_channels: 32, kernel: 7, pad: 0, stride: 1, gn_groups: 16 },
            LayerSpec::Pool { method: pool, kernel: 2, stride: 2 },
            LayerSpec::ConvBlock { out_channels: 64, kernel: 4, pad: 0, stride: 1, gn_groups: 16 },
            LayerSpec::Pool { method: pool, kernel: 2, stride: 2 },
            LayerSpec::Dense { out: 10 },
        ],
    }
}

/// VGG-style net for 32x32 RGB images: stacked 3x3 conv blocks with
/// kernel-5 stride-2 pooling, a global average pool, and a 10-way output.
pub fn vgg_cifar(pool: PoolMethod, neuron: NeuronParams<f64>, time_steps: usize) -> NetworkSpec {
    let cb = |out_channels| LayerSpec::ConvBlock {
        out_channels,
        kernel: 3,
        pad: 1,
        stride: 1,
        gn_groups: 16,
    };
    let pool_layer = LayerSpec::Pool { method: pool, kernel: 5, stride: 2 };
    NetworkSpec {
        input: Shape::new(3, 32, 32),
        time_steps,
        neuron,
        layers: vec![
            cb(64),
            cb(64),
            pool_layer.clone(),
            cb(128),
            cb(128),
            pool_layer.clone(),
            cb(128),
            cb(128),
            pool_layer,
            cb(256),
            cb(256),
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense { out: 10 },
        ],
    }
}

/// Draws initial parameters: kernels and biases uniform in
/// (-1/sqrt(fan_in), 1/sqrt(fan_in)), normalization scale 1 and shift 0.
/// Draws happen in f64 in canonical parameter order, so f32 and f64 engines
/// see the same underlying stream.
pub fn init_params<R: Real>(plan: &NetworkPlan<R>, rng: &mut impl Rng) -> Vec<R> {
    let mut params = vec![R::zero(); plan.param_len];
    for layer in &plan.layers {
        match &layer.kind {
            PlannedKind::ConvBlock { geom, kernel, bias, gn_scale, gn_shift, .. } => {
                let bound = 1.0 / (geom.patch_len() as f64).sqrt();
                for i in kernel.clone().chain(bias.clone()) {
                    params[i] = r(rng.gen_range(-bound..bound));
                }
                for i in gn_scale.clone() {
                    params[i] = R::one();
                }
                for i in gn_shift.clone() {
                    params[i] = R::zero();
                }
            }
            PlannedKind::Dense { weight, bias, in_dim, .. } => {
                let bound = 1.0 / (*in_dim as f64).sqrt();
                for i in weight.clone().chain(bias.clone()) {
                    params[i] = r(rng.gen_range(-bound..bound));
                }
            }
            PlannedKind::Pool { .. } | PlannedKind::GlobalAvgPool => {}
        }
    }
    params
}
