//! Leaky integrate-and-fire neurons with an arctangent surrogate gradient.
//!
//! One call to [`lif_step`] advances a whole layer of neurons by one spiking
//! time step:
//!
//! ```text
//! H = v + (x - (v - v_reset)) / tau
//! S = heaviside(H - v_threshold)
//! v <- H * (1 - S) + v_reset * S
//! ```
//!
//! The backward pass replaces the Heaviside derivative with
//! `alpha / (2 * (1 + (pi/2 * alpha * u)^2))`, the derivative of
//! `atan(pi/2 * alpha * u) / pi + 1/2`.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::real::{r, Real};
use crate::tensor::{Function, Tape, Tensor, Var};

/// How the forward pass turns `H - v_threshold` into an output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SpikeFn {
    /// Binary spikes. This is the real neuron.
    #[default]
    Heaviside,
    /// The smooth function whose exact derivative is the surrogate. Only for
    /// finite-difference checks of the surrogate-gradient path.
    Smooth,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifConfig {
    pub tau: f64,
    pub v_threshold: f64,
    pub v_reset: f64,
    pub surrogate_alpha: f64,
    /// Exclude the reset product from the gradient path.
    pub detach_reset: bool,
    pub spike_fn: SpikeFn,
}

impl Default for LifConfig {
    fn default() -> Self {
        Self {
            tau: 2.0,
            v_threshold: 1.0,
            v_reset: 0.0,
            surrogate_alpha: 2.0,
            detach_reset: true,
            spike_fn: SpikeFn::Heaviside,
        }
    }
}

impl LifConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 1.0) {
            return Err(Error::BadParam(format!("LIF tau must be > 1, got {}", self.tau)));
        }
        if !(self.v_threshold > self.v_reset) {
            return Err(Error::BadParam(format!(
                "LIF v_threshold ({}) must exceed v_reset ({})",
                self.v_threshold, self.v_reset
            )));
        }
        if !(self.surrogate_alpha > 0.0) {
            return Err(Error::BadParam("surrogate alpha must be positive".into()));
        }
        Ok(())
    }

    /// Configuration for finite-difference checks: smooth spikes and an
    /// undetached reset, so the tape gradient is the exact derivative.
    pub fn for_gradcheck(self) -> Self {
        Self {
            spike_fn: SpikeFn::Smooth,
            detach_reset: false,
            ..self
        }
    }
}

/// Membrane potentials of one neuron layer across spiking time steps.
///
/// The potential lives on the tape of the forward pass that owns the state so
/// gradients flow through time.
#[derive(Debug, Default)]
pub struct LifState<'t, T: Real> {
    v: Option<Var<'t, T>>,
    step_index: usize,
}

impl<'t, T: Real> LifState<'t, T> {
    pub fn new() -> Self {
        Self {
            v: None,
            step_index: 0,
        }
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    /// Current membrane potential; `None` means "v_reset everywhere".
    pub fn potential(&self) -> Option<Var<'t, T>> {
        self.v
    }

    pub fn is_fresh(&self) -> bool {
        self.v.is_none() && self.step_index == 0
    }
}

/// Returns the state to `v = v_reset` everywhere and step 0.
pub fn reset_state<T: Real>(state: &mut LifState<'_, T>, _cfg: &LifConfig) {
    state.v = None;
    state.step_index = 0;
}

/// `alpha / (2 * (1 + (pi/2 * alpha * u)^2))` elementwise.
pub fn surrogate_grad<T: Real>(u: &Tensor<T>, alpha: f64) -> Tensor<T> {
    u.map(|x| surrogate_scalar(x, alpha))
}

#[inline]
fn surrogate_scalar<T: Real>(u: T, alpha: f64) -> T {
    let z = r::<T>(FRAC_PI_2 * alpha) * u;
    r::<T>(alpha) / (r::<T>(2.0) * (T::one() + z * z))
}

struct Spike {
    threshold: f64,
    alpha: f64,
}

impl<T: Real> Function<T> for Spike {
    fn name(&self) -> &'static str {
        "spike"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Vec<T>>> {
        let th: T = r(self.threshold);
        let g = inputs[0]
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&h, &g)| g * surrogate_scalar(h - th, self.alpha))
            .collect();
        vec![Some(g)]
    }
}

/// Threshold nonlinearity on a charged potential `h`.
pub fn spike<'t, T: Real>(h: Var<'t, T>, cfg: &LifConfig) -> Result<Var<'t, T>> {
    let th: T = r(cfg.v_threshold);
    let hv = h.value();
    let out = match cfg.spike_fn {
        SpikeFn::Heaviside => hv.map(|x| if x - th >= T::zero() { T::one() } else { T::zero() }),
        SpikeFn::Smooth => {
            let k: T = r(FRAC_PI_2 * cfg.surrogate_alpha);
            hv.map(|x| (k * (x - th)).atan() / T::PI() + r(0.5))
        }
    };
    h.tape().apply(
        Box::new(Spike {
            threshold: cfg.v_threshold,
            alpha: cfg.surrogate_alpha,
        }),
        &[h],
        out,
    )
}

/// Advances the layer by one step and returns its spikes.
pub fn lif_step<'t, T: Real>(
    x: Var<'t, T>,
    state: &mut LifState<'t, T>,
    cfg: &LifConfig,
) -> Result<Var<'t, T>> {
    let tape: &'t Tape<T> = x.tape();
    let inv_tau: T = r(1.0 / cfg.tau);
    let v_reset: T = r(cfg.v_reset);
    let h = match state.v {
        None => x.scale(inv_tau)?.offset(v_reset)?,
        Some(v) => {
            if v.shape() != x.shape() {
                return Err(Error::StateShapeMismatch {
                    state: v.shape(),
                    input: x.shape(),
                });
            }
            // v + (x - (v - v_reset)) / tau
            let drive = x.sub(v.offset(-v_reset)?)?;
            v.add(drive.scale(inv_tau)?)?
        }
    };
    let s = spike(h, cfg)?;
    let v_new = if cfg.detach_reset {
        let sv = s.value();
        let keep = sv.map(|q| T::one() - q);
        let h_kept = h.mul_const(keep)?;
        if cfg.v_reset == 0.0 {
            h_kept
        } else {
            h_kept.add(tape.constant(sv.map(|q| q * v_reset)))?
        }
    } else {
        h.mul(s.one_minus()?)?.add(s.scale(v_reset)?)?
    };
    state.v = Some(v_new);
    state.step_index += 1;
    Ok(s)
}
