use serde::{Deserialize, Serialize};

use super::{KernelError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment buffers and step counter for bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = |p: &Tensor| Tensor::zeros(p.shape());
        Self {
            config,
            t: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }
}

/// One Adam update over every parameter, then zeroes the gradients.
///
/// Fails without touching anything if a parameter has no gradient or the
/// moment buffers do not line up with the parameters.
pub fn adam_step(params: &mut [Tensor], state: &mut AdamState) -> Result<(), KernelError> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(KernelError::StateMismatch {
            index: params.len().min(state.m.len()),
            expected: vec![params.len()],
            found: vec![state.m.len()],
        });
    }
    for (i, p) in params.iter().enumerate() {
        if p.grad().is_none() {
            return Err(KernelError::MissingGradient(i));
        }
        if state.m[i].shape() != p.shape() || state.v[i].shape() != p.shape() {
            return Err(KernelError::StateMismatch {
                index: i,
                expected: p.shape().to_vec(),
                found: state.m[i].shape().to_vec(),
            });
        }
    }
    state.t += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = p.grad().expect("checked above").to_vec();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let data = p.data_mut();
        for j in 0..data.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
        p.zero_grad();
    }
    Ok(())
}
