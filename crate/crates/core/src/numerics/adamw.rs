use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moments for each parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T> {
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let (first, second) = shapes
            .into_iter()
            .map(|s| (Tensor::zeros(s), Tensor::zeros(s)))
            .unzip();
        AdamWState {
            first,
            second,
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay.
///
/// `decay[i]` selects which parameters are decayed; `lr` overrides the
/// config's rate so callers can schedule it.
pub fn adamw_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    decay: &[bool],
    state: &mut AdamWState<T>,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() || params.len() != decay.len() {
        return Err(Error::Contract(format!(
            "adamw: {} params, {} grads, {} moments, {} decay flags",
            params.len(),
            grads.len(),
            state.first.len(),
            decay.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let (inv_bc1, inv_bc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
    let lr_t = T::lit(lr);
    let eps = T::lit(cfg.eps);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i];
        if p.shape() != g.shape() || p.shape() != state.first[i].shape() {
            return Err(Error::dim("adamw_step", p.shape(), g.shape()));
        }
        let shrink = T::lit(1.0 - lr * cfg.weight_decay);
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            if decay[i] {
                *w *= shrink;
            }
            let gj = g.data()[j];
            m[j] = b1 * m[j] + one_b1 * gj;
            v[j] = b2 * v[j] + one_b2 * gj * gj;
            let m_hat = m[j] * inv_bc1;
            let v_hat = v[j] * inv_bc2;
            *w -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
