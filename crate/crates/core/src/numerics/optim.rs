//! Adam with an exponentially decaying learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for one parameter set.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
    step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<S>>, config: AdamConfig) -> Self {
        let first: Vec<Tensor<S>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        let second = first.clone();
        AdamState {
            config,
            first,
            second,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update, applied in place.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Tensor<S>], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} params, {} grads, {} accumulators",
                    params.len(),
                    grads.len(),
                    self.first.len()
                ),
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("param {:?}, grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (S::of(beta1), S::of(beta2));
        let (one_b1, one_b2) = (S::of(1.0 - beta1), S::of(1.0 - beta2));
        let step_size = S::of(lr / bc1);
        let inv_bc2 = S::of(1.0 / bc2);
        let eps = S::of(eps);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                *w = *w - step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `initial_lr * decay_rate^(step / decay_steps)`, continuous in `step`.
pub fn decayed_lr(initial_lr: f64, step: u64, decay_rate: f64, decay_steps: u64) -> f64 {
    initial_lr * decay_rate.powf(step as f64 / decay_steps.max(1) as f64)
}
