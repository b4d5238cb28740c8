//! AdamW with decoupled weight decay and bias-corrected moments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moments exist only for parameters that receive gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<Option<Vec<f64>>>,
    pub v: Vec<Option<Vec<f64>>>,
}

impl OptimState {
    pub fn new(store: &ParamStore) -> Self {
        let alloc = || {
            store
                .entries()
                .iter()
                .map(|e| e.receives_grad().then(|| vec![0.0; e.value.data.len()]))
                .collect::<Vec<_>>()
        };
        Self {
            step: 0,
            m: alloc(),
            v: alloc(),
        }
    }

    /// Number of scalars held in first-moment buffers.
    pub fn state_len(&self) -> usize {
        self.m.iter().flatten().map(Vec::len).sum()
    }
}

pub fn adamw_step(store: &mut ParamStore, grads: &Grads, state: &mut OptimState, hp: &AdamW) -> Result<()> {
    for (e, g) in store.entries().iter().zip(grads.iter()) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", e.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (i, (e, g)) in store.entries_mut().iter_mut().zip(grads.iter()).enumerate() {
        let (Some(m), Some(v)) = (state.m[i].as_mut(), state.v[i].as_mut()) else {
            continue;
        };
        if !e.receives_grad() {
            continue;
        }
        for (k, p) in e.value.data.iter_mut().enumerate() {
            let gk = g[k];
            m[k] = hp.beta1 * m[k] + (1.0 - hp.beta1) * gk;
            v[k] = hp.beta2 * v[k] + (1.0 - hp.beta2) * gk * gk;
            let mh = m[k] / bc1;
            let vh = v[k] / bc2;
            *p -= hp.lr * (mh / (vh.sqrt() + hp.eps) + hp.weight_decay * *p);
        }
    }
    Ok(())
}
