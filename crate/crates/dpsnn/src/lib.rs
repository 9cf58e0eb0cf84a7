//! Differentially private spiking neural network training engine.

pub mod accountant;
pub mod bptt;
pub mod checkpoint;
pub mod data;
pub mod dp_optimizer;
pub mod layers;
pub mod matmul;
pub mod network;
pub mod neuron;
pub mod real;
pub mod tensor;
pub mod trainer;

pub use accountant::PrivacyLedger;
pub use bptt::{PerSampleGradient, Tape};
pub use checkpoint::Checkpoint;
pub use data::{EncodedSample, LabeledImageSet};
pub use dp_optimizer::{DpConfig, OptimizerState};
pub use network::{NetworkPlan, NetworkSpec};
pub use neuron::{MembraneState, NeuronKind, NeuronParams};
pub use real::Real;
pub use tensor::Tensor;
pub use trainer::{MetricsRow, NoiseSetting, RunConfig, TrainOutcome};
