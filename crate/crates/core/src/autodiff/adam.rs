use super::param::ParamStore;
use super::tensor::Tensor;
use crate::error::{MilError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment estimates for every parameter in a store, indexed like the store.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect::<Vec<_>>()
        };
        AdamState {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }
}

/// One bias-corrected Adam update of every trainable parameter, then zeroes
/// all gradients. Frozen parameters are never written.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(MilError::InvalidConfig(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if state.first.len() != params.len()
        || params
            .iter()
            .zip(&state.first)
            .any(|(p, m)| p.value.shape() != m.shape())
    {
        return Err(MilError::shape(
            "adam_step",
            "optimizer state does not match parameters",
        ));
    }
    state.step += 1;
    let AdamConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let correction1 = 1.0 - beta1.powi(state.step as i32);
    let correction2 = 1.0 - beta2.powi(state.step as i32);

    for ((param, m), v) in params
        .iter_mut()
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        if param.trainable {
            let values = param.value.as_mut_slice();
            let grads = param.grad.as_slice();
            for (((w, &g), m), v) in values.iter_mut().zip(grads).zip(m.as_mut_slice()).zip(v.as_mut_slice()) {
                let g = g + weight_decay * *w;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / correction1;
                let v_hat = *v / correction2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            if !param.value.is_finite() {
                return Err(MilError::InvalidValue(format!(
                    "parameter {} became non-finite",
                    param.name
                )));
            }
        }
        param.zero_grad();
    }
    Ok(())
}
