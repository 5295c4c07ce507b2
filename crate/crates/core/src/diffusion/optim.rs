use crate::error::Result;
use crate::params::ParamStore;
use crate::real::{r, Real};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T: Real> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies the accumulated gradients in `store`; frozen parameters are
    /// skipped.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powf(self.step as f64);
        let bc2 = 1.0 - c.beta2.powf(self.step as f64);
        let (b1, b2): (T, T) = (r(c.beta1), r(c.beta2));
        let (one_b1, one_b2): (T, T) = (r(1.0 - c.beta1), r(1.0 - c.beta2));
        let step_size: T = r(c.lr / bc1);
        let inv_bc2: T = r(1.0 / bc2);
        let eps: T = r(c.eps);
        let shrink: T = r(1.0 - c.lr * c.weight_decay);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if p.frozen {
                continue;
            }
            let g = p.grad.data();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                *w = *w * shrink - step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
            if !p.value.is_finite() {
                return Err(crate::Error::NonFinite { op: "adamw" });
            }
        }
        Ok(())
    }
}
