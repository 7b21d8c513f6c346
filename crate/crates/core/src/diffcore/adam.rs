//! Adam updates over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use super::{DiffError, ParamStore};

/// Adam hyper-parameters; `Default` gives the standard values.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> AdamParams {
        AdamParams { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam step over every parameter, consuming the
/// accumulated gradients (they are cleared afterwards).
///
/// A NaN gradient aborts before touching any parameter and reports the
/// offending name.
pub fn adam_step(store: &mut ParamStore, hp: &AdamParams) -> Result<(), DiffError> {
    for p in store.params() {
        if p.grad.iter().any(|g| !g.is_finite()) {
            return Err(DiffError::NanGradient(p.name.clone()));
        }
    }
    let t = store.bump_step();
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);
    for p in store.params_mut() {
        let value = p.value.data_mut();
        for i in 0..value.len() {
            let g = p.grad[i];
            p.m[i] = hp.beta1 * p.m[i] + (1.0 - hp.beta1) * g;
            p.v[i] = hp.beta2 * p.v[i] + (1.0 - hp.beta2) * g * g;
            let m_hat = p.m[i] / bc1;
            let v_hat = p.v[i] / bc2;
            value[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
            p.grad[i] = 0.0;
        }
    }
    Ok(())
}

/// Scales all gradients down so their global L2 norm is at most
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let total: f64 = store
        .params()
        .iter()
        .flat_map(|p| p.grad.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let scale = max_norm / total;
        for p in store.params_mut() {
            p.grad.iter_mut().for_each(|g| *g *= scale);
        }
    }
    total
}
