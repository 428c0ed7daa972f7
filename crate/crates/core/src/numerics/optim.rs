use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [Option<Tensor>]], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|gs| gs.iter())
        .flatten()
        .map(|t| t.data().iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for gs in grads.iter_mut() {
            for t in gs.iter_mut().flatten() {
                t.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

/// One bias-corrected Adam update. Missing gradients (`None`) count as zero.
///
/// Every gradient is checked before any parameter moves, so a failed step
/// leaves `params` and `state` untouched.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    hyper: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(dim_err!(
            "adam: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for (id, g) in params.ids().zip(grads) {
        if let Some(g) = g {
            if g.shape() != params.get(id).shape() {
                return Err(dim_err!(
                    "adam: gradient {:?} for `{}` {:?}",
                    g.shape(),
                    params.name(id),
                    params.get(id).shape()
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient {
                    param: params.name(id).to_string(),
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let p = params.get_mut(id).data_mut();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        match &grads[k] {
            Some(g) => {
                for (((pi, mi), vi), &gi) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                    *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * gi;
                    *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * gi * gi;
                    *pi -= hyper.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + hyper.eps);
                }
            }
            None => {
                for ((pi, mi), vi) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi *= hyper.beta1;
                    *vi *= hyper.beta2;
                    *pi -= hyper.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + hyper.eps);
                }
            }
        }
    }
    Ok(())
}
