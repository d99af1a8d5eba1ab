use serde::{Deserialize, Serialize};

use super::DenseMatrix;
use crate::error::{Error, Result};

/// How the weight-decay coefficient enters the update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightDecay {
    /// `λ·p` is added to the gradient before the moment updates (an L2
    /// penalty of `λ/2·‖p‖²` on the loss).
    Coupled,
    /// `lr·λ·p` is subtracted from the parameter after the Adam step.
    Decoupled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay: WeightDecay,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decay: WeightDecay::Coupled,
        }
    }
}

impl AdamConfig {
    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }
}

/// Moment accumulators for one parameter block. Minimizes.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            config,
        }
    }

    pub fn for_matrix(p: &DenseMatrix, config: AdamConfig) -> Self {
        Self::new(p.rows() * p.cols(), config)
    }

    pub fn step(&mut self, param: &mut [f64], grad: &[f64]) -> Result<()> {
        if param.len() != grad.len() || param.len() != self.m.len() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: (param.len(), 1),
                rhs: (grad.len(), self.m.len()),
            });
        }
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for i in 0..param.len() {
            let mut g = grad[i];
            if c.decay == WeightDecay::Coupled {
                g += c.weight_decay * param[i];
            }
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            param[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            if c.decay == WeightDecay::Decoupled {
                param[i] -= c.lr * c.weight_decay * param[i];
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam descent step on a matrix parameter.
pub fn adam_step(param: &mut DenseMatrix, grad: &DenseMatrix, state: &mut AdamState) -> Result<()> {
    param.check_same(grad, "adam_step")?;
    state.step(param.as_mut_slice(), grad.as_slice())
}
