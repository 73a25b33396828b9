//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the shared step count.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One Adam step. A `None` gradient leaves that parameter and its moments
/// untouched (the parameter took no part in this step's computation).
pub fn adam_step<T: Element>(
    params: &mut [&mut Tensor<T>],
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(dim_err!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(dim_err!("adam: grad {:?} for param {:?}", g.shape(), p.shape()));
            }
        }
    }
    state.t += 1;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let c1 = one - T::from_f64(cfg.beta1.powi(state.t as i32));
    let c2 = one - T::from_f64(cfg.beta2.powi(state.t as i32));
    let lr = T::from_f64(cfg.lr);
    let eps = T::from_f64(cfg.eps);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let Some(g) = g else { continue };
        let (md, vd) = (m.data_mut(), v.data_mut());
        let gd = g.data();
        let pd = p.data_mut();
        for i in 0..pd.len() {
            md[i] = b1 * md[i] + (one - b1) * gd[i];
            vd[i] = b2 * vd[i] + (one - b2) * gd[i] * gd[i];
            let mhat = md[i] / c1;
            let vhat = vd[i] / c2;
            // lr = 0 must leave the parameter bit-identical, including -0.0
            if cfg.lr != 0.0 {
                pd[i] = pd[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
    Ok(())
}
