//! Adam with decoupled weight decay, and the step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>, config: AdamConfig) -> Self {
        let zeros = || {
            let mut z = ModelParams::new();
            for (k, t) in params.iter() {
                z.insert(k.clone(), Tensor::zeros(t.shape().to_vec()));
            }
            z
        };
        AdamState {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One update. Weight decay is decoupled: every parameter is first scaled by
/// `1 − lr·wd`, then moved by the bias-corrected Adam step. Any non-finite
/// gradient aborts before anything is modified.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut AdamState<T>,
    lr: f64,
    wd: f64,
) -> Result<()> {
    for (name, _) in params.iter() {
        let g = grads.get(name).ok_or_else(|| Error::MissingParam(format!("gradient of {name}")))?;
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.t += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    let (b1, b2) = (T::lit(beta1), T::lit(beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
    let decay = T::lit(1.0 - lr * wd);
    let step = T::lit(lr / bc1);
    let inv_bc2 = T::lit(1.0 / bc2);
    let eps = T::lit(eps);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked above").data();
        let m = state.m.get_mut(name).ok_or_else(|| Error::MissingParam(format!("adam state {name}")))?;
        let m = m.data_mut();
        let v = state.v.get_mut(name).ok_or_else(|| Error::MissingParam(format!("adam state {name}")))?;
        let v = v.data_mut();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + one_b1 * g[i];
            v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
            *w = *w * decay - step * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}

/// `base_lr · 0.5^⌊epoch / period⌋`.
pub fn lr_schedule(epoch: usize, base_lr: f64, period: usize) -> f64 {
    let halvings = (epoch / period.max(1)) as i32;
    base_lr * 0.5f64.powi(halvings)
}
