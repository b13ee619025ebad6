//! Adam with optional decoupled weight decay, and the step learning-rate
//! schedule.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{load_tensors, save_tensors, Gradients, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decoupled: bool,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decoupled: true,
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update. Parameters without a gradient are left untouched,
    /// including by weight decay. Decay applies only where `Param::decay`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64, hp: &AdamParams) {
        self.t += 1;
        let bc1 = 1.0 - hp.beta1.powi(self.t as i32);
        let bc2 = 1.0 - hp.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = grads.param(id) else { continue };
            let decay = if store.param(id).decay { hp.weight_decay } else { 0.0 };
            let theta = store.value_mut(id).data_mut();
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for i in 0..theta.len() {
                let mut gi = g[i];
                if !hp.decoupled {
                    gi += decay * theta[i];
                }
                m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * gi;
                v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                if hp.decoupled {
                    theta[i] -= lr * decay * theta[i];
                }
                theta[i] -= lr * mhat / (vhat.sqrt() + hp.eps);
            }
        }
    }

    /// Moments are saved under the owning parameter's name.
    pub fn save(&self, dir: &Path, store: &ParamStore) -> Result<()> {
        let names: Vec<&str> = store.iter().map(|(_, p)| p.name.as_str()).collect();
        save_tensors(&dir.join("adam_m"), names.iter().copied().zip(&self.m))?;
        save_tensors(&dir.join("adam_v"), names.iter().copied().zip(&self.v))
    }

    pub fn load(dir: &Path, store: &ParamStore, t: u64) -> Result<Self> {
        let mut adam = Self::new(store);
        adam.t = t;
        for (sub, slot) in [("adam_m", &mut adam.m), ("adam_v", &mut adam.v)] {
            for (name, tensor) in load_tensors(&dir.join(sub))? {
                let id = store
                    .id(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("{sub}: unknown parameter {name}")))?;
                if tensor.shape() != store.value(id).shape() {
                    return Err(Error::Checkpoint(format!("{sub}: shape mismatch for {name}")));
                }
                slot[store.ids().position(|i| i == id).unwrap()] = tensor;
            }
        }
        Ok(adam)
    }
}

/// `base * gamma^(epoch / step_epochs)` with integer division.
pub fn step_lr(base: f64, epoch: usize, step_epochs: usize, gamma: f64) -> f64 {
    base * gamma.powi((epoch / step_epochs) as i32)
}
