//! Dense linear algebra, seeded randomness, top-k masking, cosine matching,
//! logistic probes and Adam.
//!
//! Everything here is pure: the same inputs give the same outputs, and the
//! row-parallel kernels never reorder a reduction.

mod adam;
mod matrix;
mod ops;
mod probe;
mod rng;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use matrix::{dot, l2_norm, Matrix};
pub use ops::{
    cosine_similarity_argmax, row_l2_norms, top_k_indices, top_k_indices_signed, top_k_mask,
    top_k_mask_signed, CosineMatch,
};
pub use probe::{fit_linear_probe, ProbeConfig, ProbeModel};
pub use rng::RngStream;

/// Mean and the ±2 standard-error band of a sample.
pub fn mean_and_2sem(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 2.0 * (var / n).sqrt())
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = logits.iter().map(|&l| (l as f64 - mx).exp()).sum::<f64>().ln() + mx;
    logits.iter().map(|&l| l as f64 - lse).collect()
}

/// Arg-max with lowest-index tie-breaking.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
