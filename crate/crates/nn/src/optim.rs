//! AdamW with decoupled weight decay and a polynomial-decay schedule.

use crate::layers::{ParamId, ParamStore};
use crate::tensor::Tensor;
use std::collections::HashMap;

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-4 }
    }
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

pub struct AdamW {
    pub config: AdamWConfig,
    slots: HashMap<ParamId, Slot>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, slots: HashMap::new() }
    }

    /// Apply one update to `id` with gradient `grad` at learning rate `lr`.
    /// Parameters never passed here are left untouched (stage gating).
    pub fn step_param(&mut self, store: &mut ParamStore, id: ParamId, grad: &[f64], lr: f64) {
        let value = store.get(id);
        assert_eq!(value.numel(), grad.len());
        let slot = self.slots.entry(id).or_insert_with(|| Slot {
            m: vec![0.0; grad.len()],
            v: vec![0.0; grad.len()],
            step: 0,
        });
        slot.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(slot.step as i32);
        let bc2 = 1.0 - c.beta2.powi(slot.step as i32);
        let mut out = value.data().to_vec();
        for i in 0..grad.len() {
            slot.m[i] = c.beta1 * slot.m[i] + (1.0 - c.beta1) * grad[i];
            slot.v[i] = c.beta2 * slot.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
            let mhat = slot.m[i] / bc1;
            let vhat = slot.v[i] / bc2;
            out[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * out[i]);
        }
        let shape = value.shape().to_vec();
        store.set(id, Tensor::new(&shape, out));
    }
}

/// lr(t) = lr0 * (1 - t/T)^power, the poly schedule.
pub fn poly_lr(lr0: f64, step: u64, total: u64, power: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    lr0 * (1.0 - frac).max(0.0).powf(power)
}
