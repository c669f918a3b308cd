use serde::{Deserialize, Serialize};

use super::network::{Network, ParamSlot};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled decay: each step also subtracts `learning_rate · weight_decay · p`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.learning_rate > 0.0) || !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        if !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// Adam with bias correction and decoupled weight decay. Moment buffers are
/// created lazily on the first step and must keep matching the parameter
/// layout afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.second_moment
    }

    /// Applies one update to the given parameter tensors. Gradients are
    /// checked for finiteness before anything is modified.
    pub fn step(&mut self, slots: Vec<ParamSlot<'_>>) -> Result<()> {
        if self.first_moment.is_empty() {
            self.first_moment = slots.iter().map(|s| vec![0.0; s.values.len()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        if slots.len() != self.first_moment.len() {
            return Err(Error::dim(
                "adam parameter tensors",
                self.first_moment.len(),
                slots.len(),
            ));
        }
        for (i, slot) in slots.iter().enumerate() {
            if slot.values.len() != self.first_moment[i].len()
                || slot.grads.len() != slot.values.len()
            {
                return Err(Error::dim(
                    format!("adam {}", slot.label),
                    self.first_moment[i].len(),
                    slot.grads.len(),
                ));
            }
            if let Some(bad) = slot.grads.iter().position(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "gradient of {} at index {bad}",
                    slot.label
                )));
            }
        }

        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for (i, slot) in slots.into_iter().enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for j in 0..slot.values.len() {
                let g = slot.grads[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let p = slot.values[j];
                slot.values[j] = p - lr * weight_decay * p - lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }

    pub fn step_network(&mut self, net: &mut Network) -> Result<()> {
        self.step(net.param_slots())
    }
}
