//! Feature coders: views of a feed-forward sublayer as a feature dictionary
//! (FF-KV and its TopK / normalized variants) and trained sparse proxies
//! (SAE, Transcoder), all behind one encode / decode / forward contract.

mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{FeedForwardWeights, HookSite, Model};
use crate::numerics::{row_l2_norms, top_k_mask, top_k_mask_signed, Matrix};

pub use train::{
    train_sparse_coder, train_sparse_coder_on, SparseActivationKind, SparseCoderHyper, TrainingLog,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoderKind {
    Ffkv,
    TopkFfkv,
    NormFfkv,
    TopkNormFfkv,
    Sae,
    Transcoder,
}

impl CoderKind {
    pub const ALL: [CoderKind; 6] = [
        CoderKind::Ffkv,
        CoderKind::TopkFfkv,
        CoderKind::NormFfkv,
        CoderKind::TopkNormFfkv,
        CoderKind::Sae,
        CoderKind::Transcoder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CoderKind::Ffkv => "ffkv",
            CoderKind::TopkFfkv => "topk_ffkv",
            CoderKind::NormFfkv => "norm_ffkv",
            CoderKind::TopkNormFfkv => "topk_norm_ffkv",
            CoderKind::Sae => "sae",
            CoderKind::Transcoder => "transcoder",
        }
    }

    pub fn is_ffkv(self) -> bool {
        !matches!(self, CoderKind::Sae | CoderKind::Transcoder)
    }
}

impl fmt::Display for CoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CoderKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown coder kind {s:?}")))
    }
}

/// Serializable description of a coder, without its weights.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureCoderHandle {
    pub kind: CoderKind,
    pub layer: usize,
    pub d_in: usize,
    pub d_coder: usize,
    pub d_out: usize,
    /// Free-form reference to where the weights came from.
    pub source: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopKConfig {
    pub k: usize,
    /// Keep the k largest signed values instead of the k largest magnitudes.
    #[serde(default)]
    pub signed: bool,
    /// Normalized variants only: scale by the value-row norms before
    /// selecting, and expose the scaled values as feature activations.
    #[serde(default)]
    pub norm_before_topk: bool,
}

impl Default for TopKConfig {
    fn default() -> Self {
        Self {
            k: 10,
            signed: false,
            norm_before_topk: false,
        }
    }
}

impl TopKConfig {
    pub fn with_k(k: usize) -> Self {
        Self {
            k,
            ..Self::default()
        }
    }

    fn apply(&self, row: &[f32]) -> Vec<f32> {
        if self.signed {
            top_k_mask_signed(row, self.k)
        } else {
            top_k_mask(row, self.k)
        }
    }
}

/// Row norms `s` of W_V and the row-normalized value matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationAux {
    pub s: Vec<f32>,
    pub w_tilde_v: Matrix,
    /// Rows of W_V with zero norm; their normalized rows stay zero.
    pub zero_rows: Vec<usize>,
}

impl NormalizationAux {
    pub fn from_values(w_v: &Matrix) -> Self {
        let s = row_l2_norms(w_v);
        let mut w_tilde_v = w_v.clone();
        let mut zero_rows = Vec::new();
        for (i, &si) in s.iter().enumerate() {
            let row = w_tilde_v.row_mut(i);
            if si > 0.0 {
                let inv = 1.0 / si as f64;
                row.iter_mut().for_each(|v| *v = (*v as f64 * inv) as f32);
            } else {
                zero_rows.push(i);
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Self {
            s,
            w_tilde_v,
            zero_rows,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SparseActivation {
    Relu,
    JumpRelu { theta: Vec<f32> },
    TopK { k: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseCoderWeights {
    /// d_in × d_coder.
    pub w_enc: Matrix,
    pub b_enc: Vec<f32>,
    /// d_coder × d_out, rows unit norm after training.
    pub w_dec: Matrix,
    pub b_dec: Vec<f32>,
    pub activation: SparseActivation,
}

impl SparseCoderWeights {
    pub fn d_in(&self) -> usize {
        self.w_enc.rows()
    }

    pub fn d_coder(&self) -> usize {
        self.w_enc.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w_dec.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.d_coder();
        if c == 0 {
            return Err(Error::invalid("sparse coder width must be at least 1"));
        }
        if self.w_dec.rows() != c || self.b_enc.len() != c || self.b_dec.len() != self.d_out() {
            return Err(Error::shape("sparse coder weights are inconsistent"));
        }
        match &self.activation {
            SparseActivation::JumpRelu { theta } => {
                if theta.len() != c {
                    return Err(Error::shape("JumpReLU threshold length"));
                }
                if theta.iter().any(|t| !(*t >= 0.0)) {
                    return Err(Error::invalid("JumpReLU thresholds must be non-negative"));
                }
            }
            SparseActivation::TopK { k } if *k == 0 || *k > c => {
                return Err(Error::invalid(format!("top-k {k} outside 1..={c}")));
            }
            _ => {}
        }
        Ok(())
    }

    /// Encoder pre-activations `x·W_enc + b_enc`.
    pub fn preactivations(&self, x: &Matrix) -> Result<Matrix> {
        let mut z = x.matmul(&self.w_enc)?;
        z.add_row_vector(&self.b_enc);
        Ok(z)
    }

    pub fn activate(&self, z: &Matrix) -> Matrix {
        let mut a = z.clone();
        match &self.activation {
            SparseActivation::Relu => a.data_mut().iter_mut().for_each(|v| *v = v.max(0.0)),
            SparseActivation::JumpRelu { theta } => {
                for r in 0..a.rows() {
                    for (v, &t) in a.row_mut(r).iter_mut().zip(theta) {
                        if *v <= t {
                            *v = 0.0;
                        }
                    }
                }
            }
            SparseActivation::TopK { k } => {
                for r in 0..a.rows() {
                    let row = a.row_mut(r);
                    row.iter_mut().for_each(|v| *v = v.max(0.0));
                    let kept = top_k_mask_signed(row, *k);
                    row.copy_from_slice(&kept);
                }
            }
        }
        a
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CoderBody {
    FfKv {
        ff: FeedForwardWeights,
        topk: Option<TopKConfig>,
        norm: Option<NormalizationAux>,
    },
    Sparse(SparseCoderWeights),
}

/// A coder bound to one layer of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureCoder {
    kind: CoderKind,
    layer: usize,
    source: String,
    body: CoderBody,
}

impl FeatureCoder {
    pub fn ffkv(model: &Model, layer: usize) -> Result<Self> {
        Self::ffkv_variant(model, layer, None, false)
    }

    pub fn topk_ffkv(model: &Model, layer: usize, topk: TopKConfig) -> Result<Self> {
        Self::ffkv_variant(model, layer, Some(topk), false)
    }

    pub fn norm_ffkv(model: &Model, layer: usize) -> Result<Self> {
        Self::ffkv_variant(model, layer, None, true)
    }

    pub fn topk_norm_ffkv(model: &Model, layer: usize, topk: TopKConfig) -> Result<Self> {
        Self::ffkv_variant(model, layer, Some(topk), true)
    }

    /// Build any FF-KV flavour from explicit weights.
    pub fn from_ff(
        ff: FeedForwardWeights,
        layer: usize,
        topk: Option<TopKConfig>,
        normalized: bool,
    ) -> Result<Self> {
        ff.validate()?;
        if let Some(t) = &topk {
            if t.k == 0 || t.k > ff.d_ff() {
                return Err(Error::invalid(format!("top-k {} outside 1..={}", t.k, ff.d_ff())));
            }
        }
        let kind = match (topk.is_some(), normalized) {
            (false, false) => CoderKind::Ffkv,
            (true, false) => CoderKind::TopkFfkv,
            (false, true) => CoderKind::NormFfkv,
            (true, true) => CoderKind::TopkNormFfkv,
        };
        let norm = normalized.then(|| NormalizationAux::from_values(&ff.w_v));
        Ok(Self {
            kind,
            layer,
            source: String::new(),
            body: CoderBody::FfKv { ff, topk, norm },
        })
    }

    fn ffkv_variant(
        model: &Model,
        layer: usize,
        topk: Option<TopKConfig>,
        normalized: bool,
    ) -> Result<Self> {
        let ff = model.ff(layer)?.clone();
        Self::from_ff(ff, layer, topk, normalized)
    }

    pub fn from_sparse(kind: CoderKind, layer: usize, weights: SparseCoderWeights) -> Result<Self> {
        if kind.is_ffkv() {
            return Err(Error::invalid(format!("{kind} is not a trained coder kind")));
        }
        weights.validate()?;
        Ok(Self {
            kind,
            layer,
            source: String::new(),
            body: CoderBody::Sparse(weights),
        })
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }

    pub fn kind(&self) -> CoderKind {
        self.kind
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn body(&self) -> &CoderBody {
        &self.body
    }

    pub fn topk(&self) -> Option<&TopKConfig> {
        match &self.body {
            CoderBody::FfKv { topk, .. } => topk.as_ref(),
            CoderBody::Sparse(_) => None,
        }
    }

    pub fn normalization(&self) -> Option<&NormalizationAux> {
        match &self.body {
            CoderBody::FfKv { norm, .. } => norm.as_ref(),
            CoderBody::Sparse(_) => None,
        }
    }

    pub fn d_in(&self) -> usize {
        match &self.body {
            CoderBody::FfKv { ff, .. } => ff.d_model(),
            CoderBody::Sparse(w) => w.d_in(),
        }
    }

    pub fn d_coder(&self) -> usize {
        match &self.body {
            CoderBody::FfKv { ff, .. } => ff.d_ff(),
            CoderBody::Sparse(w) => w.d_coder(),
        }
    }

    pub fn d_out(&self) -> usize {
        match &self.body {
            CoderBody::FfKv { ff, .. } => ff.d_model(),
            CoderBody::Sparse(w) => w.d_out(),
        }
    }

    pub fn handle(&self) -> FeatureCoderHandle {
        FeatureCoderHandle {
            kind: self.kind,
            layer: self.layer,
            d_in: self.d_in(),
            d_coder: self.d_coder(),
            d_out: self.d_out(),
            source: self.source.clone(),
        }
    }

    /// Hook site the coder reads from. Only the SAE reads the sublayer output.
    pub fn input_site(&self) -> HookSite {
        match self.kind {
            CoderKind::Sae => HookSite::FfOut,
            _ => HookSite::FfIn,
        }
    }

    /// Hook site the coder reconstructs.
    pub fn target_site(&self) -> HookSite {
        HookSite::FfOut
    }

    fn scaled_features(&self) -> bool {
        matches!(
            &self.body,
            CoderBody::FfKv { norm: Some(_), topk: Some(t), .. } if t.norm_before_topk
        )
    }

    /// Feature activations for a batch of inputs (one row per token).
    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.d_in() {
            return Err(Error::shape(format!(
                "{} encode expects {} columns, got {}",
                self.kind,
                self.d_in(),
                x.cols()
            )));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("coder input"));
        }
        match &self.body {
            CoderBody::FfKv { ff, topk, norm } => {
                let mut a = ff.neuron_activations(x)?;
                if self.scaled_features() {
                    let s = &norm.as_ref().expect("checked above").s;
                    for r in 0..a.rows() {
                        for (v, &si) in a.row_mut(r).iter_mut().zip(s) {
                            *v = (*v as f64 * si as f64) as f32;
                        }
                    }
                }
                if let Some(t) = topk {
                    for r in 0..a.rows() {
                        let kept = t.apply(a.row(r));
                        a.row_mut(r).copy_from_slice(&kept);
                    }
                }
                Ok(a)
            }
            CoderBody::Sparse(w) => Ok(w.activate(&w.preactivations(x)?)),
        }
    }

    /// Reconstruction of the target activation from feature activations.
    pub fn decode(&self, a: &Matrix) -> Result<Matrix> {
        if a.cols() != self.d_coder() {
            return Err(Error::shape(format!(
                "{} decode expects {} columns, got {}",
                self.kind,
                self.d_coder(),
                a.cols()
            )));
        }
        match &self.body {
            CoderBody::FfKv { ff, norm: None, .. } => ff.output_from_neurons(a),
            CoderBody::FfKv {
                ff, norm: Some(n), ..
            } => {
                let mut out = if self.scaled_features() {
                    a.matmul(&n.w_tilde_v)?
                } else {
                    let mut scaled = a.clone();
                    for r in 0..scaled.rows() {
                        for (v, &si) in scaled.row_mut(r).iter_mut().zip(&n.s) {
                            *v = (*v as f64 * si as f64) as f32;
                        }
                    }
                    scaled.matmul(&n.w_tilde_v)?
                };
                out.add_row_vector(&ff.b_v);
                ff.apply_post_norm(&mut out);
                Ok(out)
            }
            CoderBody::Sparse(w) => {
                let mut out = a.matmul(&w.w_dec)?;
                out.add_row_vector(&w.b_dec);
                Ok(out)
            }
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.decode(&self.encode(x)?)
    }

    /// Feature vectors as rows: W_V for FF-KV kinds, W_dec otherwise.
    pub fn dictionary(&self) -> &Matrix {
        match &self.body {
            CoderBody::FfKv { ff, .. } => &ff.w_v,
            CoderBody::Sparse(w) => &w.w_dec,
        }
    }

    /// Unit-norm feature directions; zero rows stay zero.
    pub fn unit_directions(&self) -> Matrix {
        match &self.body {
            CoderBody::FfKv { norm: Some(n), .. } => n.w_tilde_v.clone(),
            _ => NormalizationAux::from_values(self.dictionary()).w_tilde_v,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ActivationKind;
    use crate::numerics::RngStream;

    fn hand_ff() -> FeedForwardWeights {
        FeedForwardWeights {
            w_k: Matrix::from_rows(&[[1.0, -1.0, 0.5], [0.0, 2.0, 1.0]]).unwrap(),
            w_v: Matrix::from_rows(&[[3.0, 4.0], [0.0, 2.0], [1.0, 0.0]]).unwrap(),
            w_g: None,
            b_k: Some(vec![0.0, 0.0, -1.0]),
            b_v: vec![0.5, -0.5],
            activation: ActivationKind::Relu,
            post_norm_gain: None,
        }
    }

    fn random_swiglu(rng: &mut RngStream) -> FeedForwardWeights {
        FeedForwardWeights {
            w_k: rng.normal_matrix(6, 24, 0.5),
            w_v: rng.normal_matrix(24, 6, 0.3),
            w_g: Some(rng.normal_matrix(6, 24, 0.5)),
            b_k: None,
            b_v: rng.normal_vec(6, 0.1),
            activation: ActivationKind::Swiglu,
            post_norm_gain: None,
        }
    }

    #[test]
    fn normalization_of_hand_values() {
        let aux = NormalizationAux::from_values(&hand_ff().w_v);
        assert_eq!(aux.s, vec![5.0, 2.0, 1.0]);
        assert_eq!(aux.w_tilde_v.row(0), &[0.6, 0.8]);
        assert!(aux.zero_rows.is_empty());
        let coder = FeatureCoder::from_ff(hand_ff(), 0, None, true).unwrap();
        let out = coder.decode(&Matrix::from_rows(&[[1.0, 1.0, 1.0]]).unwrap()).unwrap();
        // [3,4] + [0,2] + [1,0] + b_V
        assert_eq!(out.row(0), &[4.5, 5.5]);
    }

    #[test]
    fn zero_value_rows_are_flagged() {
        let mut ff = hand_ff();
        ff.w_v.row_mut(1).fill(0.0);
        let aux = NormalizationAux::from_values(&ff.w_v);
        assert_eq!(aux.zero_rows, vec![1]);
        assert_eq!(aux.w_tilde_v.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn ffkv_encode_matches_scalar_oracle() {
        let coder = FeatureCoder::from_ff(hand_ff(), 0, None, false).unwrap();
        let x = Matrix::from_rows(&[[0.3, -0.7], [2.0, 1.0]]).unwrap();
        let a = coder.encode(&x).unwrap();
        let ff = hand_ff();
        for r in 0..2 {
            for j in 0..3 {
                let mut z = ff.b_k.as_ref().unwrap()[j] as f64;
                for i in 0..2 {
                    z += x.get(r, i) as f64 * ff.w_k.get(i, j) as f64;
                }
                assert_eq!(a.get(r, j), z.max(0.0) as f32);
            }
        }
    }

    #[test]
    fn topk_with_full_width_is_plain_ffkv() {
        let mut rng = RngStream::new(1, 0);
        let ff = random_swiglu(&mut rng);
        let x = rng.normal_matrix(10, 6, 1.0);
        let plain = FeatureCoder::from_ff(ff.clone(), 0, None, false).unwrap();
        let full = FeatureCoder::from_ff(ff, 0, Some(TopKConfig::with_k(24)), false).unwrap();
        assert_eq!(plain.encode(&x).unwrap(), full.encode(&x).unwrap());
    }

    #[test]
    fn sae_identity_encoder() {
        let w = SparseCoderWeights {
            w_enc: Matrix::identity(2),
            b_enc: vec![0.0; 2],
            w_dec: Matrix::identity(2),
            b_dec: vec![0.0; 2],
            activation: SparseActivation::Relu,
        };
        let coder = FeatureCoder::from_sparse(CoderKind::Sae, 0, w).unwrap();
        let a = coder.encode(&Matrix::from_rows(&[[1.0, -2.0]]).unwrap()).unwrap();
        assert_eq!(a.row(0), &[1.0, 0.0]);
        assert_eq!(coder.decode(&Matrix::zeros(1, 2)).unwrap().row(0), &[0.0, 0.0]);
    }

    #[test]
    fn decode_of_zero_is_value_bias() {
        for normalized in [false, true] {
            let coder = FeatureCoder::from_ff(hand_ff(), 0, None, normalized).unwrap();
            assert_eq!(coder.decode(&Matrix::zeros(1, 3)).unwrap().row(0), &[0.5, -0.5]);
        }
    }

    #[test]
    fn norm_before_topk_selects_scaled_support() {
        let mut rng = RngStream::new(2, 0);
        let ff = random_swiglu(&mut rng);
        let x = rng.normal_matrix(8, 6, 1.0);
        let cfg = TopKConfig {
            k: 3,
            signed: false,
            norm_before_topk: true,
        };
        let coder = FeatureCoder::from_ff(ff.clone(), 0, Some(cfg), true).unwrap();
        let s = row_l2_norms(&ff.w_v);
        let raw = ff.neuron_activations(&x).unwrap();
        let a = coder.encode(&x).unwrap();
        for r in 0..8 {
            let scaled: Vec<f32> = raw
                .row(r)
                .iter()
                .zip(&s)
                .map(|(&v, &si)| (v as f64 * si as f64) as f32)
                .collect();
            assert_eq!(a.row(r), top_k_mask(&scaled, 3).as_slice());
        }
        // scaled features decode through unit rows to the same top-k output
        let out = coder.decode(&a).unwrap();
        assert!(out.is_finite());
    }

    #[test]
    fn kind_strings_round_trip() {
        for k in CoderKind::ALL {
            assert_eq!(k.as_str().parse::<CoderKind>().unwrap(), k);
        }
        assert!("mlp".parse::<CoderKind>().is_err());
    }

    #[test]
    fn rejects_bad_widths() {
        assert!(FeatureCoder::from_ff(hand_ff(), 0, Some(TopKConfig::with_k(0)), false).is_err());
        assert!(FeatureCoder::from_ff(hand_ff(), 0, Some(TopKConfig::with_k(4)), false).is_err());
        let coder = FeatureCoder::from_ff(hand_ff(), 0, None, false).unwrap();
        assert!(coder.encode(&Matrix::zeros(1, 3)).is_err());
        assert!(coder.decode(&Matrix::zeros(1, 2)).is_err());
    }
}
