//! Discrete-time LIF and IF membrane dynamics with hard-reset firing and the
//! triangular surrogate derivative used during backpropagation.
//!
//! One update step computes, elementwise over a layer,
//!
//! ```text
//! LIF:  V' = λ·V·(1−o_prev) + (1−λ)·I      (leak λ, hard reset on spike)
//! IF:   V' =   V·(1−o_prev) +       I      (no leak, raw input)
//! spike o' = 1  iff  V' ≥ V_th             (fires at exact equality)
//! ```
//!
//! All potentials and spikes start at zero for each sample's time window.

use thiserror::Error;

use crate::real::{r, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeuronKind {
    Lif,
    If,
}

/// Membrane parameters shared by every neuron of a network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeuronParams<R> {
    /// Leak rate λ in [0, 1]. Ignored by IF neurons.
    pub leak_rate: R,
    /// Firing threshold V_th > 0.
    pub threshold: R,
    pub kind: NeuronKind,
}

#[derive(Error, Debug, PartialEq)]
pub enum NeuronError {
    #[error("leak rate {0} outside [0, 1]")]
    LeakOutOfRange(f64),
    #[error("threshold {0} must be positive")]
    ThresholdNotPositive(f64),
    #[error("state holds {state} neurons but input current has {input}")]
    ShapeMismatch { state: usize, input: usize },
    #[error("non-finite input current at index {0}")]
    NonFiniteInput(usize),
    #[error("step called with {got:?} parameters, expected {expected:?}")]
    KindMismatch { expected: NeuronKind, got: NeuronKind },
}

impl<R: Real> NeuronParams<R> {
    pub fn lif(leak_rate: R, threshold: R) -> Result<Self, NeuronError> {
        if !(leak_rate >= R::zero() && leak_rate <= R::one()) {
            return Err(NeuronError::LeakOutOfRange(leak_rate.as_f64()));
        }
        if !(threshold > R::zero()) {
            return Err(NeuronError::ThresholdNotPositive(threshold.as_f64()));
        }
        Ok(NeuronParams {
            leak_rate,
            threshold,
            kind: NeuronKind::Lif,
        })
    }

    /// IF neurons carry no leak; the stored leak rate is unused.
    pub fn integrate_fire(threshold: R) -> Result<Self, NeuronError> {
        if !(threshold > R::zero()) {
            return Err(NeuronError::ThresholdNotPositive(threshold.as_f64()));
        }
        Ok(NeuronParams {
            leak_rate: R::one(),
            threshold,
            kind: NeuronKind::If,
        })
    }

    /// Factor multiplying the retained potential in one step.
    #[inline(always)]
    pub fn decay(&self) -> R {
        match self.kind {
            NeuronKind::Lif => self.leak_rate,
            NeuronKind::If => R::one(),
        }
    }

    /// Factor multiplying the input current in one step.
    #[inline(always)]
    pub fn input_scale(&self) -> R {
        match self.kind {
            NeuronKind::Lif => R::one() - self.leak_rate,
            NeuronKind::If => R::one(),
        }
    }

    /// Converts the parameter scalars into another float width.
    pub fn cast<S: Real>(&self) -> NeuronParams<S> {
        NeuronParams {
            leak_rate: r(self.leak_rate.as_f64()),
            threshold: r(self.threshold.as_f64()),
            kind: self.kind,
        }
    }
}

/// Per-layer membrane state carried across time steps.
#[derive(Clone, Debug)]
pub struct MembraneState<R> {
    /// Potential V per neuron.
    pub potential: Vec<R>,
    /// Previous-step spike per neuron, 0 or 1.
    pub last_spike: Vec<u8>,
}

impl<R: Real> MembraneState<R> {
    pub fn zeros(n: usize) -> Self {
        MembraneState {
            potential: vec![R::zero(); n],
            last_spike: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.potential.len()
    }

    pub fn is_empty(&self) -> bool {
        self.potential.is_empty()
    }
}

/// One LIF membrane update over a layer; the new spikes land in
/// `state.last_spike` and the new potentials in `state.potential`.
pub fn lif_step<R: Real>(
    state: &mut MembraneState<R>,
    input_current: &[R],
    params: &NeuronParams<R>,
) -> Result<(), NeuronError> {
    if params.kind != NeuronKind::Lif {
        return Err(NeuronError::KindMismatch {
            expected: NeuronKind::Lif,
            got: params.kind,
        });
    }
    checked_step(state, input_current, params)
}

/// One IF membrane update; integrates the raw input without leak.
pub fn if_step<R: Real>(
    state: &mut MembraneState<R>,
    input_current: &[R],
    params: &NeuronParams<R>,
) -> Result<(), NeuronError> {
    if params.kind != NeuronKind::If {
        return Err(NeuronError::KindMismatch {
            expected: NeuronKind::If,
            got: params.kind,
        });
    }
    checked_step(state, input_current, params)
}

fn checked_step<R: Real>(
    state: &mut MembraneState<R>,
    input_current: &[R],
    params: &NeuronParams<R>,
) -> Result<(), NeuronError> {
    if state.len() != input_current.len() {
        return Err(NeuronError::ShapeMismatch {
            state: state.len(),
            input: input_current.len(),
        });
    }
    if let Some(i) = input_current.iter().position(|v| !v.is_finite()) {
        return Err(NeuronError::NonFiniteInput(i));
    }
    step_unchecked(
        &mut state.potential,
        &mut state.last_spike,
        input_current,
        params.decay(),
        params.input_scale(),
        params.threshold,
    );
    Ok(())
}

/// The validated hot-path kernel used by the forward pass.
#[inline]
pub(crate) fn step_unchecked<R: Real>(
    potential: &mut [R],
    last_spike: &mut [u8],
    input_current: &[R],
    decay: R,
    input_scale: R,
    threshold: R,
) {
    for i in 0..potential.len() {
        let retained = if last_spike[i] == 1 { R::zero() } else { potential[i] };
        let v = decay * retained + input_scale * input_current[i];
        potential[i] = v;
        last_spike[i] = u8::from(v >= threshold);
    }
}

/// Triangular surrogate for the spike derivative dg/dV:
/// `−2·|V − V_th| + 1` inside the unit-width triangle, 0 elsewhere.
/// The boundary `|V − V_th| = 1/2` maps to 0 (measure-zero choice).
#[inline(always)]
pub fn surrogate_grad<R: Real>(potential: R, params: &NeuronParams<R>) -> R {
    let d = (potential - params.threshold).abs();
    if d < r(0.5) {
        R::one() - (d + d)
    } else {
        R::zero()
    }
}
