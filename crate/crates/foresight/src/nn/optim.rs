//! Adam with bias correction.

use super::params::ParamSet;
use super::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamSet, lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: store.entries().iter().map(|e| Tensor::zeros(&e.value.shape)).collect(),
            v: store.entries().iter().map(|e| Tensor::zeros(&e.value.shape)).collect(),
        }
    }

    /// Apply one update using the store's current gradients.
    pub fn step(&mut self, store: &mut ParamSet) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..entry.value.len() {
                let g = entry.grad.data[j];
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * g;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * g * g;
                let mhat = m.data[j] / bc1;
                let vhat = v.data[j] / bc2;
                entry.value.data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
