use serde::{Deserialize, Serialize};

use super::tensor::{ParamStore, Tensor};
use super::NumError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers, one pair per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect::<Vec<_>>()
        };
        AdamState {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update over every parameter, then zeroes the grads.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<(), NumError> {
    if state.m.len() != store.len() {
        return Err(NumError::Optimizer(format!(
            "optimizer state tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    if let Some((_, p)) = store.iter().find(|(_, p)| p.grad.is_none()) {
        return Err(NumError::Optimizer(format!(
            "missing gradient for parameter `{}`",
            p.name
        )));
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for id in store.ids().collect::<Vec<_>>() {
        let p = store.get_mut(id);
        let grad = p.grad.as_mut().expect("checked above");
        let m = state.m[id.0].data_mut();
        let v = state.v[id.0].data_mut();
        for (((w, g), m), v) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        grad.data_mut().fill(0.0);
    }
    Ok(())
}
