//! Adam and plain SGD over a [`MilModel`]'s tensors.

use super::config::{OptimizerConfig, TrainConfig};
use crate::mil::MilModel;

/// Moment estimates and step count. `beta*_pow` track `beta^t` by repeated
/// multiplication so the bias correction is reproducible bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first: MilModel,
    pub second: MilModel,
    pub step: u64,
    beta1_pow: f64,
    beta2_pow: f64,
}

impl OptimizerState {
    pub fn new(params: &MilModel) -> Self {
        Self {
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
            beta1_pow: 1.0,
            beta2_pow: 1.0,
        }
    }
}

pub fn optimizer_step(state: &mut OptimizerState, params: &mut MilModel, grads: &MilModel, config: &TrainConfig) {
    let lr = config.learning_rate;
    state.step += 1;
    match config.optimizer {
        OptimizerConfig::Sgd => {
            for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
                for (pv, &gv) in p.iter_mut().zip(g) {
                    *pv -= lr * gv;
                }
            }
        }
        OptimizerConfig::Adam { beta1, beta2, epsilon } => {
            state.beta1_pow *= beta1;
            state.beta2_pow *= beta2;
            let c1 = 1.0 - state.beta1_pow;
            let c2 = 1.0 - state.beta2_pow;
            let tensors = params
                .tensors_mut()
                .into_iter()
                .zip(grads.tensors())
                .zip(state.first.tensors_mut())
                .zip(state.second.tensors_mut());
            for (((p, g), m), v) in tensors {
                for i in 0..p.len() {
                    let gi = g[i];
                    m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    p[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
    }
}
