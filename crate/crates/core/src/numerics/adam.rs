use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Zero the moments of a single entry (used when a feature is resampled).
    pub fn reset_entry(&mut self, i: usize) {
        self.m[i] = 0.0;
        self.v[i] = 0.0;
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [f32],
    grads: &[f32],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || state.v.len() != state.m.len() {
        return Err(Error::shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let g = g as f64;
        let mn = hyper.beta1 * *m as f64 + (1.0 - hyper.beta1) * g;
        let vn = hyper.beta2 * *v as f64 + (1.0 - hyper.beta2) * g * g;
        *m = mn as f32;
        *v = vn as f32;
        let step = hyper.lr * (mn / bc1) / ((vn / bc2).sqrt() + hyper.eps);
        *p = (*p as f64 - step) as f32;
    }
    Ok(())
}
