//! Leaky integrate-and-fire neurons with hard reset and a sigmoid surrogate gradient.
//!
//! The differentiable multi-step neuron used by the network lives on [`Var::lif`];
//! this module holds the parameters, the binary-tensor newtype and the
//! single-step state machine used for inspection and tests.
//!
//! [`Var::lif`]: crate::tensor::Var::lif

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use crate::tensor::SpikeFn;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LifParams {
    pub v_threshold: f32,
    /// Membrane time constant; the per-step leak factor is `1 / tau`.
    pub tau: f32,
    pub surrogate_slope: f32,
    /// Treat the `(1 − S_{t-1})` reset factor as a constant in backward.
    pub detach_reset: bool,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            v_threshold: 0.6,
            tau: 2.0,
            surrogate_slope: 4.0,
            detach_reset: true,
        }
    }
}

impl LifParams {
    pub fn decay(&self) -> f32 {
        1.0 / self.tau
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.decay();
        if !(d > 0.0 && d < 1.0) {
            return Err(Error::config(format!("LIF decay 1/tau = {d} must lie in (0, 1)")));
        }
        if !(self.v_threshold > 0.0) {
            return Err(Error::config("LIF threshold must be positive"));
        }
        if !(self.surrogate_slope > 0.0) {
            return Err(Error::config("surrogate slope must be positive"));
        }
        Ok(())
    }
}

/// A tensor whose every element is exactly 0.0 or 1.0.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeTensor(Tensor);

impl SpikeTensor {
    /// Wrap `t`, checking binarity in debug builds.
    pub fn new(t: Tensor) -> Self {
        debug_assert!(t.is_binary(), "spike tensor with non-binary values");
        Self(t)
    }

    /// Wrap `t`, always checking binarity.
    pub fn try_new(t: Tensor) -> Result<Self> {
        if t.is_binary() {
            Ok(Self(t))
        } else {
            Err(Error::contract("spike tensor must be {0,1}-valued"))
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self(Tensor::zeros(shape))
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn firing_rate(&self) -> f64 {
        self.0.mean()
    }
}

/// Membrane potential and last spikes of a layer of neurons.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState {
    pub membrane: Tensor,
    pub last_spike: SpikeTensor,
}

impl LifState {
    pub fn rest(shape: &[usize]) -> Self {
        Self {
            membrane: Tensor::zeros(shape),
            last_spike: SpikeTensor::zeros(shape),
        }
    }
}

/// One timestep: `V_t = decay · V_{t-1} · (1 − S_{t-1}) + x`, `S_t = [V_t ≥ V_th]`.
pub fn lif_step(state: &LifState, input: &Tensor, params: &LifParams) -> Result<(LifState, SpikeTensor)> {
    if input.shape() != state.membrane.shape() {
        return Err(Error::shape("lif_step", state.membrane.shape(), input.shape()));
    }
    let decay = params.decay();
    let membrane: Vec<f32> = state
        .membrane
        .data()
        .iter()
        .zip(state.last_spike.as_tensor().data())
        .zip(input.data())
        .map(|((&v, &s), &x)| decay * v * (1.0 - s) + x)
        .collect();
    let spikes: Vec<f32> = membrane
        .iter()
        .map(|&v| if v >= params.v_threshold { 1.0 } else { 0.0 })
        .collect();
    let shape = input.shape();
    let spikes = SpikeTensor::new(Tensor::from_vec(shape, spikes)?);
    let next = LifState {
        membrane: Tensor::from_vec(shape, membrane)?,
        last_spike: spikes.clone(),
    };
    Ok((next, spikes))
}

/// Run a fresh neuron layer over a sequence of inputs; also returns the membrane trace.
pub fn lif_forward(inputs: &[Tensor], params: &LifParams) -> Result<(Vec<SpikeTensor>, Vec<Tensor>)> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::contract("LIF forward over an empty sequence"))?;
    let mut state = LifState::rest(first.shape());
    let mut spikes = Vec::with_capacity(inputs.len());
    let mut trace = Vec::with_capacity(inputs.len());
    for x in inputs {
        let (next, s) = lif_step(&state, x, params)?;
        trace.push(next.membrane.clone());
        spikes.push(s);
        state = next;
    }
    Ok((spikes, trace))
}

/// Surrogate derivative `k · σ(k·x) · (1 − σ(k·x))` of the Heaviside at `x = V − V_th`.
pub fn surrogate_grad(v_minus_th: &Tensor, slope: f32) -> Tensor {
    v_minus_th.map(|x| crate::tensor::ops_surrogate(x, slope))
}
