//! Discrete-time spiking neurons: charge, fire, hard reset.
//!
//! One simulation step for a layer of neurons with potentials `V(t-1)` and
//! input `X(t)`:
//!
//! ```text
//! H(t) = V(t-1) + k · (X(t) - (V(t-1) - V_reset))     k = 1/τ (LIF) or sigmoid(a) (PLIF)
//! S(t) = Θ(H(t) - V_th)
//! V(t) = H(t) · (1 - S(t)) + V_reset · S(t)
//! ```
//!
//! `Θ(0) = 1`. Backward replaces `dΘ/du` with [`surrogate_grad`], an
//! arctangent-shaped bump of width `alpha`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{ensure_same_shape, split_axis, Tensor};

pub const DEFAULT_V_TH: f64 = 1.0;
pub const DEFAULT_V_RESET: f64 = 0.0;
pub const DEFAULT_ALPHA: f64 = 2.0;
/// Initial PLIF parameter; `sigmoid(0) = 1/2`, i.e. an effective τ of 2.
pub const DEFAULT_PLIF_A: f64 = 0.0;

/// Leak coefficient source: a fixed time constant or a learnable PLIF parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Leak<A> {
    Fixed { tau: f64 },
    Learnable { a: A },
}

impl Leak<f64> {
    /// The factor `k` multiplying `X(t) - (V(t-1) - V_reset)` in the charge equation.
    pub fn coefficient(&self) -> Result<f64> {
        match *self {
            Leak::Fixed { tau } if tau > 0.0 => Ok(1.0 / tau),
            Leak::Fixed { tau } => Err(Error::validation(format!("time constant must be positive, got {tau}"))),
            Leak::Learnable { a } => Ok(sigmoid(a)),
        }
    }
}

/// Forward firing function.
///
/// `SmoothSurrogate` replaces the step with `1/2 + atan(π·alpha·u/2)/π`, whose
/// derivative is exactly [`surrogate_grad`]. It exists so gradient checks have a
/// differentiable reference; networks use `Heaviside`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SpikeFn {
    #[default]
    Heaviside,
    SmoothSurrogate,
}

/// Threshold, reset and surrogate settings shared by a layer of neurons.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpikeConfig {
    pub v_th: f64,
    pub v_reset: f64,
    pub alpha: f64,
    pub spike_fn: SpikeFn,
}

impl Default for SpikeConfig {
    fn default() -> Self {
        Self { v_th: DEFAULT_V_TH, v_reset: DEFAULT_V_RESET, alpha: DEFAULT_ALPHA, spike_fn: SpikeFn::Heaviside }
    }
}

impl SpikeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_reset < self.v_th) {
            return Err(Error::validation(format!(
                "v_reset ({}) must be below v_th ({})",
                self.v_reset, self.v_th
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::validation(format!("surrogate width alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }

    fn spike(&self, h: f64) -> f64 {
        match self.spike_fn {
            SpikeFn::Heaviside => heaviside(h - self.v_th),
            SpikeFn::SmoothSurrogate => 0.5 + (PI * self.alpha * (h - self.v_th) / 2.0).atan() / PI,
        }
    }
}

/// Full description of a neuron population.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeuronParams {
    pub v_th: f64,
    pub v_reset: f64,
    pub alpha: f64,
    pub kind: Leak<f64>,
}

impl Default for NeuronParams {
    fn default() -> Self {
        Self {
            v_th: DEFAULT_V_TH,
            v_reset: DEFAULT_V_RESET,
            alpha: DEFAULT_ALPHA,
            kind: Leak::Learnable { a: DEFAULT_PLIF_A },
        }
    }
}

impl NeuronParams {
    pub fn lif(tau: f64) -> Self {
        Self { kind: Leak::Fixed { tau }, ..Self::default() }
    }

    pub fn plif(a: f64) -> Self {
        Self { kind: Leak::Learnable { a }, ..Self::default() }
    }

    pub fn spike_config(&self) -> SpikeConfig {
        SpikeConfig { v_th: self.v_th, v_reset: self.v_reset, alpha: self.alpha, spike_fn: SpikeFn::Heaviside }
    }

    pub fn validate(&self) -> Result<()> {
        self.spike_config().validate()?;
        self.kind.coefficient().map(|_| ())
    }
}

pub fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

/// `Θ(u)`: 1 when `u >= 0`, else 0.
pub fn heaviside(u: f64) -> f64 {
    if u >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Surrogate derivative of `Θ`: `alpha / (2 (1 + (π alpha u / 2)²))`.
pub fn surrogate_grad(u: f64, alpha: f64) -> f64 {
    let z = PI * alpha * u / 2.0;
    alpha / (2.0 * (1.0 + z * z))
}

#[inline]
fn charge(v_prev: f64, x: f64, k: f64, v_reset: f64) -> f64 {
    v_prev + k * (x - (v_prev - v_reset))
}

#[inline]
fn hard_reset(h: f64, s: f64, v_reset: f64) -> f64 {
    h * (1.0 - s) + v_reset * s
}

/// LIF charge: `H = V + (1/τ)(X - (V - V_reset))`.
pub fn lif_charge(v_prev: &Tensor, x: &Tensor, tau: f64, v_reset: f64) -> Result<Tensor> {
    let k = Leak::Fixed { tau }.coefficient()?;
    v_prev.zip_map(x, |v, x| charge(v, x, k, v_reset))
}

/// PLIF charge: `H = V + sigmoid(a)(X - (V - V_reset))`, leak term on `V(t-1)`.
pub fn plif_charge(v_prev: &Tensor, x: &Tensor, a: f64, v_reset: f64) -> Result<Tensor> {
    let k = sigmoid(a);
    v_prev.zip_map(x, |v, x| charge(v, x, k, v_reset))
}

/// Elementwise `Θ(h - v_th)`.
pub fn fire(h: &Tensor, v_th: f64) -> Tensor {
    h.map(|h| heaviside(h - v_th))
}

/// Hard reset: `V = H (1 - S) + V_reset S`.
pub fn reset(h: &Tensor, s: &Tensor, v_reset: f64) -> Result<Tensor> {
    h.zip_map(s, |h, s| hard_reset(h, s, v_reset))
}

/// Membrane potentials of one layer between timesteps.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronState {
    pub v: Tensor,
}

impl NeuronState {
    /// Fresh state at `v_reset`.
    pub fn new(shape: &[usize], v_reset: f64) -> Self {
        Self { v: Tensor::full(shape, v_reset) }
    }
}

/// Sets every potential back to `v_reset`.
pub fn reset_state(state: &NeuronState, v_reset: f64) -> NeuronState {
    NeuronState::new(state.v.shape(), v_reset)
}

/// One timestep: charge, fire, reset. Returns the spikes and the next state.
pub fn layer_step(state: &NeuronState, x: &Tensor, params: &NeuronParams) -> Result<(Tensor, NeuronState)> {
    ensure_same_shape(&state.v, x)?;
    params.validate()?;
    let h = match params.kind {
        Leak::Fixed { tau } => lif_charge(&state.v, x, tau, params.v_reset)?,
        Leak::Learnable { a } => plif_charge(&state.v, x, a, params.v_reset)?,
    };
    let s = fire(&h, params.v_th);
    let v = reset(&h, &s, params.v_reset)?;
    Ok((s, NeuronState { v }))
}

/// Runs the neuron dynamics along `axis` of `x`, every other position being an
/// independent neuron starting at `v_reset`. Returns `(H, S)` for all steps.
pub(crate) fn scan_forward(x: &Tensor, axis: usize, cfg: &SpikeConfig, k: f64) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    let (outer, steps, inner) = split_axis(x.shape(), axis);
    let xd = x.data();
    let mut h = vec![0.0; x.len()];
    let mut s = vec![0.0; x.len()];
    let mut v = vec![0.0; inner];
    for o in 0..outer {
        v.fill(cfg.v_reset);
        for t in 0..steps {
            let off = (o * steps + t) * inner;
            for i in 0..inner {
                let hi = charge(v[i], xd[off + i], k, cfg.v_reset);
                let si = cfg.spike(hi);
                h[off + i] = hi;
                s[off + i] = si;
                v[i] = hard_reset(hi, si, cfg.v_reset);
            }
        }
    }
    Ok((Tensor::new(x.shape(), h)?, Tensor::new(x.shape(), s)?))
}

/// Backpropagation through time for [`scan_forward`].
///
/// Returns `dL/dX` and `dL/dk`. Gradient flows through both reset terms with
/// `dS/dH` taken from the surrogate.
pub(crate) fn scan_backward(
    x: &Tensor,
    h: &Tensor,
    s: &Tensor,
    ds: &Tensor,
    axis: usize,
    cfg: &SpikeConfig,
    k: f64,
) -> Result<(Tensor, f64)> {
    let (outer, steps, inner) = split_axis(x.shape(), axis);
    let (xd, hd, sd, gd) = (x.data(), h.data(), s.data(), ds.data());
    let mut dx = vec![0.0; x.len()];
    let mut dk = 0.0;
    let mut dv = vec![0.0; inner];
    for o in 0..outer {
        dv.fill(0.0);
        for t in (0..steps).rev() {
            let off = (o * steps + t) * inner;
            for i in 0..inner {
                let (hi, si) = (hd[off + i], sd[off + i]);
                let sg = surrogate_grad(hi - cfg.v_th, cfg.alpha);
                let dh = gd[off + i] * sg + dv[i] * ((1.0 - si) + (cfg.v_reset - hi) * sg);
                let v_prev = if t == 0 {
                    cfg.v_reset
                } else {
                    let p = off - inner + i;
                    hard_reset(hd[p], sd[p], cfg.v_reset)
                };
                dx[off + i] = dh * k;
                dk += dh * (xd[off + i] - (v_prev - cfg.v_reset));
                dv[i] = dh * (1.0 - k);
            }
        }
    }
    Ok((Tensor::new(x.shape(), dx)?, dk))
}
