//! Bias-corrected Adam update over a [`ParameterStore`].

use crate::error::{Error, Result};

use super::params::ParameterStore;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, shaped like the store they track.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParameterStore) -> Self {
        Self { t: 0, m: store.zeros_like(), v: store.zeros_like() }
    }
}

/// One Adam step:
///
/// ```text
/// m = b1 m + (1 - b1) g        mhat = m / (1 - b1^t)
/// v = b2 v + (1 - b2) g^2      vhat = v / (1 - b2^t)
/// p -= lr * mhat / (sqrt(vhat) + eps)
/// ```
pub fn adam_step(
    store: &mut ParameterStore,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if grads.len() != store.num_entries() {
        return Err(Error::ShapeMismatch(format!(
            "gradient entries {} != parameter entries {}",
            grads.len(),
            store.num_entries()
        )));
    }
    for (k, g) in grads.iter().enumerate() {
        if g.len() != store.entry(k).data.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient for {:?} has {} values, parameter has {}",
                store.entry(k).name,
                g.len(),
                store.entry(k).data.len()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (k, g) in grads.iter().enumerate() {
        let m = &mut state.m[k];
        let v = &mut state.v[k];
        let data = &mut store.entry_mut(k).data;
        for i in 0..g.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
