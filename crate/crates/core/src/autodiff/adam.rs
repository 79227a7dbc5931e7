use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Gradients, ParamStore, Tensor2D};
use crate::Real;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient for parameter `{0}`; step aborted")]
    NonFiniteGradient(String),
    #[error("learning rate must be positive and finite, got {0}")]
    InvalidLearningRate(f64),
    #[error("gradient count {grads} does not match parameter count {params}")]
    Mismatch { grads: usize, params: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning-rate schedule evaluated per epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply by `factor` every `every` epochs.
    Step { every: usize, factor: f64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Step {
            every: 20,
            factor: 0.5,
        }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, initial: f64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => initial,
            LrSchedule::Step { every, factor } => {
                let drops = if every == 0 { 0 } else { epoch / every };
                initial * factor.powi(drops as i32)
            }
        }
    }
}

/// Adam moments for every tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState<T = f32> {
    config: AdamConfig,
    first: Vec<Tensor2D<T>>,
    second: Vec<Tensor2D<T>>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros: Vec<_> = store
            .iter()
            .map(|(_, t)| Tensor2D::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<(), OptimError> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(OptimError::InvalidLearningRate(lr));
        }
        if grads.len() != store.len() {
            return Err(OptimError::Mismatch {
                grads: grads.len(),
                params: store.len(),
            });
        }
        for (id, g) in store.ids().zip(grads.iter()) {
            if !g.is_finite() {
                return Err(OptimError::NonFiniteGradient(store.name(id).to_owned()));
            }
        }

        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
        let step_size = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(eps);

        for (i, id) in store.ids().enumerate() {
            let g = grads.get(id).data();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                p[j] = p[j] - step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
