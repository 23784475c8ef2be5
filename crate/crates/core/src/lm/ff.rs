//! The feed-forward sublayer, read as a key-value memory.
//!
//! Row-vector convention throughout: for an input `x` (1×d_model),
//! neuron activations are `φ(x·W_K + b_K)` (or the SwiGLU product
//! `(x·W_G) ⊙ swish(x·W_K)`), and the output is `a·W_V + b_V`, i.e. the sum
//! of value rows `W_V[i,:]` weighted by the activations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Swiglu,
    Gelu,
    Relu,
}

impl std::fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ActivationKind::Swiglu => "swiglu",
            ActivationKind::Gelu => "gelu",
            ActivationKind::Relu => "relu",
        })
    }
}

pub(crate) const RMS_EPS: f64 = 1e-6;

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn swish_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Weights of one feed-forward sublayer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedForwardWeights {
    /// d_model × d_FF key projection.
    pub w_k: Matrix,
    /// d_FF × d_model value rows.
    pub w_v: Matrix,
    /// d_model × d_FF gate projection, present iff the activation is SwiGLU.
    pub w_g: Option<Matrix>,
    pub b_k: Option<Vec<f32>>,
    pub b_v: Vec<f32>,
    pub activation: ActivationKind,
    /// Gain of an RMS normalization applied to the sublayer output.
    pub post_norm_gain: Option<Vec<f32>>,
}

impl FeedForwardWeights {
    pub fn d_model(&self) -> usize {
        self.w_k.rows()
    }

    pub fn d_ff(&self) -> usize {
        self.w_k.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, f) = self.w_k.shape();
        if self.w_v.shape() != (f, d) {
            return Err(Error::shape(format!(
                "W_V is {:?}, expected ({f}, {d})",
                self.w_v.shape()
            )));
        }
        match (&self.w_g, self.activation) {
            (Some(g), ActivationKind::Swiglu) if g.shape() == (d, f) => {}
            (Some(_), ActivationKind::Swiglu) => return Err(Error::shape("W_G shape")),
            (None, ActivationKind::Swiglu) => {
                return Err(Error::invalid("SwiGLU sublayer requires a gate matrix"))
            }
            (Some(_), _) => return Err(Error::invalid("gate matrix only valid for SwiGLU")),
            (None, _) => {}
        }
        if self.b_k.as_ref().is_some_and(|b| b.len() != f) || self.b_v.len() != d {
            return Err(Error::shape("bias length"));
        }
        if self.post_norm_gain.as_ref().is_some_and(|g| g.len() != d) {
            return Err(Error::shape("post-norm gain length"));
        }
        Ok(())
    }

    /// Pre-activation keys `x·W_K + b_K` for a batch of rows.
    pub fn key_preactivations(&self, x: &Matrix) -> Result<Matrix> {
        let mut pre = x.matmul(&self.w_k)?;
        if let Some(b) = &self.b_k {
            pre.add_row_vector(b);
        }
        Ok(pre)
    }

    /// Gate projections `x·W_G` (SwiGLU only).
    pub fn gate_projections(&self, x: &Matrix) -> Result<Option<Matrix>> {
        self.w_g.as_ref().map(|g| x.matmul(g)).transpose()
    }

    /// Combine pre-activations (and gates) into neuron activations.
    pub fn activate(&self, pre: &Matrix, gate: Option<&Matrix>) -> Matrix {
        let mut a = pre.clone();
        match (self.activation, gate) {
            (ActivationKind::Swiglu, Some(g)) => {
                for (v, &gv) in a.data_mut().iter_mut().zip(g.data()) {
                    *v = (gv as f64 * swish(*v as f64)) as f32;
                }
            }
            (ActivationKind::Gelu, _) => {
                a.data_mut().iter_mut().for_each(|v| *v = gelu(*v as f64) as f32);
            }
            (ActivationKind::Relu, _) => {
                a.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            (ActivationKind::Swiglu, None) => unreachable!("validated: SwiGLU has a gate"),
        }
        a
    }

    /// Neuron activations (the FF-KV keys) for a batch of inputs.
    pub fn neuron_activations(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.d_model() {
            return Err(Error::shape(format!(
                "FF input has {} columns, d_model is {}",
                x.cols(),
                self.d_model()
            )));
        }
        let pre = self.key_preactivations(x)?;
        let gate = self.gate_projections(x)?;
        Ok(self.activate(&pre, gate.as_ref()))
    }

    /// `a·W_V + b_V` followed by the post-FF normalization when present.
    pub fn output_from_neurons(&self, a: &Matrix) -> Result<Matrix> {
        if a.cols() != self.d_ff() {
            return Err(Error::shape(format!(
                "neuron activations have {} columns, d_FF is {}",
                a.cols(),
                self.d_ff()
            )));
        }
        let mut out = a.matmul(&self.w_v)?;
        out.add_row_vector(&self.b_v);
        self.apply_post_norm(&mut out);
        Ok(out)
    }

    pub fn apply_post_norm(&self, out: &mut Matrix) {
        if let Some(g) = &self.post_norm_gain {
            for r in 0..out.rows() {
                rms_norm_in_place(out.row_mut(r), g);
            }
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let a = self.neuron_activations(x)?;
        self.output_from_neurons(&a)
    }
}

pub(crate) fn rms_norm_in_place(row: &mut [f32], gain: &[f32]) {
    let ms = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / row.len() as f64;
    let r = 1.0 / (ms + RMS_EPS).sqrt();
    for (v, &g) in row.iter_mut().zip(gain) {
        *v = (*v as f64 * r * g as f64) as f32;
    }
}
