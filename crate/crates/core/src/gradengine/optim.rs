use serde::{Deserialize, Serialize};

use super::graph::{Grads, ParamId, ParamSet};
use super::scalar::Scalar;
use super::GradError;

/// Moment hyperparameters; defaults β₁ = 0.9, β₂ = 0.999, ε = 1e-7.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Keep the running maximum of the second moment (AMSGrad).
    pub amsgrad: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            amsgrad: false,
        }
    }
}

/// Adam moments for a fixed group of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub t: u64,
    pub params: Vec<ParamId>,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// Running max of `v`; empty unless AMSGrad is on.
    pub v_max: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: Vec<ParamId>, set: &ParamSet<T>) -> Self {
        let zeros = |ids: &[ParamId]| -> Vec<Vec<T>> {
            ids.iter().map(|&id| vec![T::zero(); set.get(id).len()]).collect()
        };
        Self {
            config,
            t: 0,
            m: zeros(&params),
            v: zeros(&params),
            v_max: if config.amsgrad { zeros(&params) } else { Vec::new() },
            params,
        }
    }

    /// One bias-corrected Adam update of the group with learning rate `lr`.
    ///
    /// Nothing is modified when any gradient of the group is non-finite.
    pub fn step(&mut self, set: &mut ParamSet<T>, grads: &Grads<T>, lr: f64) -> Result<(), GradError> {
        for &id in &self.params {
            if let Some(pos) = grads.get(id).iter().position(|g| !g.is_finite()) {
                return Err(GradError::NonFiniteGradient {
                    param: set.name(id).to_string(),
                    index: pos,
                });
            }
        }
        if !(lr > 0.0) {
            return Err(GradError::InvalidLearningRate(lr));
        }
        self.t += 1;
        let cfg = self.config;
        let b1 = T::from_f64_lossy(cfg.beta1);
        let b2 = T::from_f64_lossy(cfg.beta2);
        let one = T::one();
        let bc1 = T::from_f64_lossy(1.0 - cfg.beta1.powf(self.t as f64));
        let bc2 = T::from_f64_lossy(1.0 - cfg.beta2.powf(self.t as f64));
        let eps = T::from_f64_lossy(cfg.epsilon);
        let lr = T::from_f64_lossy(lr);

        for (slot, &id) in self.params.iter().enumerate() {
            let g = grads.get(id);
            let theta = set.get_mut(id).data_mut();
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for k in 0..theta.len() {
                m[k] = b1 * m[k] + (one - b1) * g[k];
                v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
                let v_used = if cfg.amsgrad {
                    let vm = &mut self.v_max[slot][k];
                    *vm = vm.max(v[k]);
                    *vm
                } else {
                    v[k]
                };
                let m_hat = m[k] / bc1;
                let v_hat = v_used / bc2;
                theta[k] = theta[k] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Staircase exponential decay: `base · decay^⌊epoch / every⌋`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_rate: f64,
    pub decay_rate: f64,
    pub decay_every: u32,
}

impl LrSchedule {
    pub fn new(base_rate: f64, decay_rate: f64, decay_every: u32) -> Result<Self, GradError> {
        if !(base_rate > 0.0) || !(decay_rate > 0.0 && decay_rate <= 1.0) || decay_every == 0 {
            return Err(GradError::InvalidSchedule {
                base_rate,
                decay_rate,
                decay_every,
            });
        }
        Ok(Self {
            base_rate,
            decay_rate,
            decay_every,
        })
    }

    pub fn rate(&self, epoch: u32) -> f64 {
        self.base_rate * self.decay_rate.powi((epoch / self.decay_every) as i32)
    }
}
