//! Adam with bias-corrected first/second moments.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Result, TfsError};

/// Adam hyperparameters. Defaults: lr 1e-3, beta1 0.9, beta2 0.999, eps 1e-8.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TfsError::Config(format!("adam lr must be positive, got {}", self.lr)));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(TfsError::Config(format!("adam {name} must be in [0,1), got {beta}")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(TfsError::Config(format!(
                "adam epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    pub fn with_lr(self, lr: f64) -> Self {
        Self { lr, ..self }
    }
}

/// Per-parameter first/second moment buffers plus the shared step counter.
/// Moments start at zero; the step counter advances by one per
/// [`adam_step`] call, which is what makes the bias correction exact.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, param_lens: &[usize]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            m: param_lens.iter().map(|&l| vec![0.0; l]).collect(),
            v: param_lens.iter().map(|&l| vec![0.0; l]).collect(),
        })
    }

    pub fn for_params(config: AdamConfig, params: &[Tensor]) -> Result<Self> {
        let lens: Vec<usize> = params.iter().map(Tensor::len).collect();
        Self::new(config, &lens)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }
}

/// One Adam update over `params`, reading each tensor's populated gradient.
///
/// Errors if a gradient is missing or mismatched; errors if an update would
/// produce a non-finite parameter. Identical state and gradients produce
/// bit-identical parameters.
pub fn adam_step(params: &mut [Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(TfsError::Optimizer(format!(
            "optimizer tracks {} parameters, got {}",
            state.m.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        match p.grad() {
            None => {
                return Err(TfsError::Optimizer(format!(
                    "parameter {i} has no gradient"
                )))
            }
            Some(g) if g.len() != state.m[i].len() => {
                return Err(TfsError::Optimizer(format!(
                    "parameter {i} gradient length {} != moment length {}",
                    g.len(),
                    state.m[i].len()
                )))
            }
            Some(_) => {}
        }
    }

    state.step += 1;
    let t = state.step;
    let c = state.config;
    let bc1 = 1.0 - c.beta1.powi(t as i32);
    let bc2 = 1.0 - c.beta2.powi(t as i32);

    for (i, p) in params.iter_mut().enumerate() {
        let g = p.grad().expect("validated above").to_vec();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let data = p.data_mut();
        for j in 0..g.len() {
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= c.lr * m_hat / (v_hat.sqrt() + c.epsilon);
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(TfsError::Numeric(format!(
                "adam update made parameter {i} non-finite"
            )));
        }
    }
    Ok(())
}
