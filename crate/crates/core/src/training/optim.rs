use serde::{Deserialize, Serialize};

use crate::tensor::{ParamGroup, ParameterSet, Tensor};

/// Adam with decoupled weight decay. Vectors (biases, layer-norm gains) are
/// not decayed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(params: &ParameterSet, config: AdamWConfig) -> Self {
        let zeros: Vec<Tensor> = params.ids().map(|id| Tensor::zeros(params.value(id).shape())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from the accumulated gradients. The effective rate of a
    /// parameter is `lr · multiplier(group)`; frozen groups are skipped.
    pub fn step(&mut self, params: &mut ParameterSet, lr: f64, multiplier: impl Fn(ParamGroup) -> f64) {
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let group = params.group(id);
            if !params.is_trainable(group) {
                continue;
            }
            let rate = lr * multiplier(group);
            if rate == 0.0 {
                continue;
            }
            let decay = params.value(id).shape().len() > 1;
            let grad = params.grad(id).data().to_vec();
            let i = id.index();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = params.value_mut(id).data_mut();
            for j in 0..w.len() {
                let g = grad[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                if decay {
                    w[j] -= rate * c.weight_decay * w[j];
                }
                w[j] -= rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
    }
}
