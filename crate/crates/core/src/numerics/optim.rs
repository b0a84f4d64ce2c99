use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::NumericsError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
        Self { config, step: 0, first: zeros(), second: zeros() }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update using the gradients stored on `params`.
    ///
    /// Every parameter must carry a finite gradient; the store is left
    /// untouched when any check fails.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<(), NumericsError> {
        if self.first.len() != params.len() {
            return Err(NumericsError::InvalidArgument {
                op: "optimizer_step",
                msg: format!("state tracks {} tensors, store has {}", self.first.len(), params.len()),
            });
        }
        for id in params.ids() {
            match params.get(id).grad() {
                None => return Err(NumericsError::MissingGradient(params.name(id).to_string())),
                Some(g) if g.iter().any(|x| !x.is_finite()) => {
                    return Err(NumericsError::NonFiniteGradient(params.name(id).to_string()))
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, id) in params.ids().enumerate() {
            let t = params.get_mut(id);
            let g = t.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, theta) in t.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *theta -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *theta);
            }
        }
        Ok(())
    }
}
