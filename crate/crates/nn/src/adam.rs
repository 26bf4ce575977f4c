use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Bias-corrected Adam with a multiplicative per-epoch learning-rate decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Factor applied to `lr` by [`AdamState::epoch_end`].
    pub epoch_decay: f64,
    pub step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState::new(1e-3)
    }
}

impl AdamState {
    /// lr decays by 3% per epoch; betas and eps take the usual values.
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epoch_decay: 0.97,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn epoch_end(&mut self) {
        self.lr *= self.epoch_decay;
    }

    /// Moment estimates for one parameter, if it has been stepped.
    pub fn moments(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        Some((self.first.get(name)?, self.second.get(name)?))
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in store.iter_mut() {
            let m = self
                .first
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            let v = self
                .second
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            let grad = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(grad).zip(md).zip(vd) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// One Adam update of every parameter in `store` from its gradient slot.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) {
    state.step(store);
}
