use std::collections::BTreeMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Bias-corrected Adam with per-parameter moments keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Tensor<T>>,
    second: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Adam<T> {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Starts a new optimizer step; call before the [`Adam::update`] calls
    /// belonging to it.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::shape(format!(
                "{name}: parameter {:?} vs gradient {:?}",
                param.shape(),
                grad.shape()
            )));
        }
        if self.step == 0 {
            return Err(Error::domain("Adam::update before begin_step"));
        }
        let m = self
            .first
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let v = self
            .second
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        if m.shape() != param.shape() {
            return Err(Error::shape(format!("{name}: moment shape changed")));
        }
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }

    /// Moment tensors as `(name, first, second)`, sorted by name.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor<T>, &Tensor<T>)> {
        self.first
            .iter()
            .map(|(k, m)| (k.as_str(), m, &self.second[k]))
    }

    /// Rebuilds optimizer state from saved moments.
    pub fn restore(
        lr: f64,
        step: u64,
        moments: impl IntoIterator<Item = (String, Tensor<T>, Tensor<T>)>,
    ) -> Adam<T> {
        let mut adam = Adam::new(lr);
        adam.step = step;
        for (name, m, v) in moments {
            adam.first.insert(name.clone(), m);
            adam.second.insert(name, v);
        }
        adam
    }
}
