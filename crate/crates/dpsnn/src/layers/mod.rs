//! Differentiable layer kernels: convolution, group/instance normalization,
//! pooling (max / average / temporal enhanced), dense, and the output loss.
//! Each kernel has an explicit forward and an explicit backward; no autodiff.

pub mod conv;
pub mod dense;
pub mod loss;
pub mod norm;
pub mod pool;
pub mod tep;

use thiserror::Error;

use crate::tensor::Shape;

#[derive(Error, Debug, PartialEq)]
pub enum LayerError {
    #[error("input has {found} channels, layer expects {expected}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("kernel {k}x{k} does not fit input {input} (padding {pad})")]
    KernelTooLarge { k: usize, input: Shape, pad: usize },
    #[error("{channels} channels not divisible into {groups} groups")]
    GroupDivisibility { channels: usize, groups: usize },
    #[error("vector length {found} does not match expected width {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("stride must be at least 1")]
    ZeroStride,
    #[error("spike input must be binary, found {value} at time {t} index {index}")]
    NonBinaryInput { value: f64, t: usize, index: usize },
    #[error("time window is empty")]
    EmptyTimeWindow,
    #[error("time steps disagree: {found} maps, expected {expected}")]
    TimeLengthMismatch { expected: usize, found: usize },
    #[error("shape mismatch: {found}, expected {expected}")]
    ShapeMismatch { expected: Shape, found: Shape },
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
}
