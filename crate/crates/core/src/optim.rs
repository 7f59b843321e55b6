use alloc::vec::Vec;

use num_traits::Float;

use crate::nn::ParamStore;
use crate::{Error, Real, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers mirror the store layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.first, &self.second)
    }

    /// Restores a saved optimizer state.
    pub fn restore(&mut self, step: u64, first: Vec<Tensor<T>>, second: Vec<Tensor<T>>) -> Result<()> {
        let ok = first.len() == self.first.len()
            && second.len() == self.second.len()
            && first.iter().zip(&self.first).all(|(a, b)| a.shape() == b.shape())
            && second.iter().zip(&self.second).all(|(a, b)| a.shape() == b.shape());
        if !ok {
            return Err(Error::config("optimizer state does not match the parameter layout"));
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// One update with the configured rate scaled by `rate_scale`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], rate_scale: f64) {
        assert_eq!(grads.len(), self.first.len(), "gradient count");
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let bc1 = 1.0 - Float::powi(c.beta1, self.step as i32);
        let bc2 = 1.0 - Float::powi(c.beta2, self.step as i32);
        let lr = T::of(c.learning_rate * rate_scale * Float::sqrt(bc2) / bc1);
        let eps = T::of(c.epsilon * Float::sqrt(bc2));
        for (((p, g), m), v) in store
            .tensors_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                *pv -= lr * *mv / (vv.sqrt() + eps);
            }
        }
    }
}
