//! Adam optimizer with bias correction.

use std::collections::BTreeMap;

use crate::error::AutodiffError;
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates, keyed by parameter name. Moments are
/// created lazily the first time a parameter is stepped.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }
}

/// One Adam update over every parameter in `params`.
///
/// `lr` is the effective learning rate for this step (the caller applies any
/// warmup schedule). Every parameter must have a populated gradient; a
/// missing one means backward/export was skipped and is a contract error.
pub fn adam_step(
    params: &mut ParamSet,
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<(), AutodiffError> {
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);

    for (name, p) in params.iter_mut() {
        let grad = p.grad.as_ref().ok_or_else(|| AutodiffError::MissingGrad(name.to_string()))?;
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.value.shape()));
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.value.shape()));
        for i in 0..grad.numel() {
            let g = grad.data()[i];
            let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * g;
            let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            p.value.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
