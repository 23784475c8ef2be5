use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ff::{ActivationKind, FeedForwardWeights};
use super::tokenizer::Tokenizer;
use super::{HookPoint, HookSite, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub ln1_g: Vec<f32>,
    pub ln1_b: Vec<f32>,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln2_g: Vec<f32>,
    pub ln2_b: Vec<f32>,
    pub ff: FeedForwardWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Vec<f32>,
    pub lnf_b: Vec<f32>,
    pub w_u: Matrix,
}

impl Params {
    /// Visit every tensor with a stable name and shape, in a fixed order.
    pub fn for_each_tensor<'a>(&'a self, mut f: impl FnMut(&str, (usize, usize), &'a [f32])) {
        f("tok_emb", self.tok_emb.shape(), self.tok_emb.data());
        f("pos_emb", self.pos_emb.shape(), self.pos_emb.data());
        for (i, l) in self.layers.iter().enumerate() {
            let d = l.ln1_g.len();
            f(&format!("layers.{i}.ln1_g"), (1, d), &l.ln1_g);
            f(&format!("layers.{i}.ln1_b"), (1, d), &l.ln1_b);
            f(&format!("layers.{i}.w_q"), l.w_q.shape(), l.w_q.data());
            f(&format!("layers.{i}.w_k"), l.w_k.shape(), l.w_k.data());
            f(&format!("layers.{i}.w_v"), l.w_v.shape(), l.w_v.data());
            f(&format!("layers.{i}.w_o"), l.w_o.shape(), l.w_o.data());
            f(&format!("layers.{i}.ln2_g"), (1, d), &l.ln2_g);
            f(&format!("layers.{i}.ln2_b"), (1, d), &l.ln2_b);
            f(&format!("layers.{i}.ff.w_k"), l.ff.w_k.shape(), l.ff.w_k.data());
            f(&format!("layers.{i}.ff.w_v"), l.ff.w_v.shape(), l.ff.w_v.data());
            if let Some(g) = &l.ff.w_g {
                f(&format!("layers.{i}.ff.w_g"), g.shape(), g.data());
            }
            if let Some(b) = &l.ff.b_k {
                f(&format!("layers.{i}.ff.b_k"), (1, b.len()), b);
            }
            f(&format!("layers.{i}.ff.b_v"), (1, l.ff.b_v.len()), &l.ff.b_v);
            if let Some(g) = &l.ff.post_norm_gain {
                f(&format!("layers.{i}.ff.post_norm_g"), (1, g.len()), g);
            }
        }
        f("lnf_g", (1, self.lnf_g.len()), &self.lnf_g);
        f("lnf_b", (1, self.lnf_b.len()), &self.lnf_b);
        f("w_u", self.w_u.shape(), self.w_u.data());
    }

    /// Mutable twin of [`Params::for_each_tensor`], same order.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut [f32])) {
        f("tok_emb", self.tok_emb.data_mut());
        f("pos_emb", self.pos_emb.data_mut());
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("layers.{i}.ln1_g"), &mut l.ln1_g);
            f(&format!("layers.{i}.ln1_b"), &mut l.ln1_b);
            f(&format!("layers.{i}.w_q"), l.w_q.data_mut());
            f(&format!("layers.{i}.w_k"), l.w_k.data_mut());
            f(&format!("layers.{i}.w_v"), l.w_v.data_mut());
            f(&format!("layers.{i}.w_o"), l.w_o.data_mut());
            f(&format!("layers.{i}.ln2_g"), &mut l.ln2_g);
            f(&format!("layers.{i}.ln2_b"), &mut l.ln2_b);
            f(&format!("layers.{i}.ff.w_k"), l.ff.w_k.data_mut());
            f(&format!("layers.{i}.ff.w_v"), l.ff.w_v.data_mut());
            if let Some(g) = &mut l.ff.w_g {
                f(&format!("layers.{i}.ff.w_g"), g.data_mut());
            }
            if let Some(b) = &mut l.ff.b_k {
                f(&format!("layers.{i}.ff.b_k"), b);
            }
            f(&format!("layers.{i}.ff.b_v"), &mut l.ff.b_v);
            if let Some(g) = &mut l.ff.post_norm_gain {
                f(&format!("layers.{i}.ff.post_norm_g"), g);
            }
        }
        f("lnf_g", &mut self.lnf_g);
        f("lnf_b", &mut self.lnf_b);
        f("w_u", self.w_u.data_mut());
    }

    pub fn zeros_like(&self) -> Params {
        let mut z = self.clone();
        z.for_each_tensor_mut(|_, t| t.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, _, t| n += t.len());
        n
    }

    /// `self += other`, tensor by tensor.
    pub fn accumulate(&mut self, other: &Params) {
        let mut src: Vec<&[f32]> = Vec::new();
        other.for_each_tensor(|_, _, t| src.push(t));
        let mut i = 0;
        self.for_each_tensor_mut(|_, t| {
            for (a, b) in t.iter_mut().zip(src[i]) {
                *a += *b;
            }
            i += 1;
        });
    }
}

/// A decoder-only transformer with pre-norm blocks, learned positions and a
/// hookable feed-forward sublayer in every block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub params: Params,
}

/// Logits plus the tensors captured at the requested hook points.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Matrix,
    pub captures: BTreeMap<HookPoint, Matrix>,
    /// Residual stream after the last block, before the final norm.
    pub final_residual: Matrix,
}

/// Everything the backward pass needs from one sequence.
pub(crate) struct LayerTrace {
    pub x_in: Matrix,
    pub ln1_xhat: Matrix,
    pub ln1_rstd: Vec<f64>,
    pub h1: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// heads × T × T, row-major, causal entries only are nonzero.
    pub probs: Vec<f32>,
    pub attn_cat: Matrix,
    pub ln2_xhat: Matrix,
    pub ln2_rstd: Vec<f64>,
    pub ff_in: Matrix,
    pub pre: Matrix,
    pub gate: Option<Matrix>,
    pub act: Matrix,
    pub ff_raw: Matrix,
}

pub(crate) struct Trace {
    pub tokens: Vec<u32>,
    pub layers: Vec<LayerTrace>,
    pub x_final: Matrix,
    pub lnf_xhat: Matrix,
    pub lnf_rstd: Vec<f64>,
    pub lnf_out: Matrix,
    pub logits: Matrix,
}

pub(crate) fn layer_norm(x: &Matrix, g: &[f32], b: &[f32]) -> (Matrix, Matrix, Vec<f64>) {
    let (t, d) = x.shape();
    let mut y = Matrix::zeros(t, d);
    let mut xhat = Matrix::zeros(t, d);
    let mut rstd = Vec::with_capacity(t);
    for r in 0..t {
        let row = x.row(r);
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = ((v as f64 - mean) * rs) as f32;
        }
        let yr = y.row_mut(r);
        for (j, o) in yr.iter_mut().enumerate() {
            *o = (xhat.get(r, j) as f64 * g[j] as f64 + b[j] as f64) as f32;
        }
    }
    (y, xhat, rstd)
}

impl Model {
    /// Untrained model with the documented initialization scale:
    /// embeddings N(0, 0.1²), input projections N(0, 1/d_model),
    /// output projections (W_O, W_V) N(0, 1/(fan_in·2·n_layers)),
    /// unembedding N(0, 1/d_model), unit norm gains and zero biases.
    pub fn random_init(config: &ModelConfig, tokenizer: Tokenizer) -> Result<Model> {
        config.validate()?;
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(Error::invalid(format!(
                "tokenizer has {} entries, config says {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        let mut rng = RngStream::new(config.seed, 0x1a7e);
        let d = config.d_model;
        let f = config.d_ff;
        let depth = (2.0 * config.n_layers as f64).sqrt();
        let in_std = 1.0 / (d as f64).sqrt();
        let tok_emb = rng.normal_matrix(config.vocab_size, d, 0.1);
        let pos_emb = rng.normal_matrix(config.context_length, d, 0.1);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let w_q = rng.normal_matrix(d, d, in_std);
            let w_k = rng.normal_matrix(d, d, in_std);
            let w_v = rng.normal_matrix(d, d, in_std);
            let w_o = rng.normal_matrix(d, d, in_std / depth);
            let ff_wk = rng.normal_matrix(d, f, in_std);
            let ff_wg = (config.activation == ActivationKind::Swiglu)
                .then(|| rng.normal_matrix(d, f, in_std));
            let ff_wv = rng.normal_matrix(f, d, 1.0 / (f as f64).sqrt() / depth);
            let ff = FeedForwardWeights {
                w_k: ff_wk,
                w_v: ff_wv,
                w_g: ff_wg,
                b_k: config.key_bias.then(|| vec![0.0; f]),
                b_v: vec![0.0; d],
                activation: config.activation,
                post_norm_gain: config.post_ff_norm.then(|| vec![1.0; d]),
            };
            layers.push(LayerParams {
                ln1_g: vec![1.0; d],
                ln1_b: vec![0.0; d],
                w_q,
                w_k,
                w_v,
                w_o,
                ln2_g: vec![1.0; d],
                ln2_b: vec![0.0; d],
                ff,
            });
        }
        let w_u = rng.normal_matrix(d, config.vocab_size, in_std);
        Ok(Model {
            config: config.clone(),
            tokenizer,
            params: Params {
                tok_emb,
                pos_emb,
                layers,
                lnf_g: vec![1.0; d],
                lnf_b: vec![0.0; d],
                w_u,
            },
        })
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn ff(&self, layer: usize) -> Result<&FeedForwardWeights> {
        self.params
            .layers
            .get(layer)
            .map(|l| &l.ff)
            .ok_or(Error::OutOfRange {
                index: layer,
                len: self.config.n_layers,
            })
    }

    pub fn validate_hook(&self, hook: HookPoint) -> Result<()> {
        if hook.layer >= self.config.n_layers {
            return Err(Error::UnknownHook(format!(
                "{hook} (model has {} layers)",
                self.config.n_layers
            )));
        }
        Ok(())
    }

    /// Width of the tensor at a hook site.
    pub fn site_width(&self, site: HookSite) -> usize {
        match site {
            HookSite::FfIn | HookSite::FfOut => self.config.d_model,
            HookSite::FfNeuron => self.config.d_ff,
        }
    }

    pub(crate) fn trace(
        &self,
        tokens: &[u32],
        hook: &mut dyn FnMut(HookPoint, &mut Matrix) -> Result<()>,
    ) -> Result<Trace> {
        let cfg = &self.config;
        let t = tokens.len();
        if t == 0 {
            return Err(Error::Empty("token sequence"));
        }
        if t > cfg.context_length {
            return Err(Error::invalid(format!(
                "{t} tokens exceed the context length {}",
                cfg.context_length
            )));
        }
        let d = cfg.d_model;
        let p = &self.params;
        let mut x = Matrix::zeros(t, d);
        for (i, &tok) in tokens.iter().enumerate() {
            if tok as usize >= cfg.vocab_size {
                return Err(Error::OutOfRange {
                    index: tok as usize,
                    len: cfg.vocab_size,
                });
            }
            let row = x.row_mut(i);
            for ((o, &e), &pe) in row.iter_mut().zip(p.tok_emb.row(tok as usize)).zip(p.pos_emb.row(i)) {
                *o = e + pe;
            }
        }

        let h = cfg.n_heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (li, lp) in p.layers.iter().enumerate() {
            let x_in = x.clone();
            let (h1, ln1_xhat, ln1_rstd) = layer_norm(&x, &lp.ln1_g, &lp.ln1_b);
            let q = h1.matmul(&lp.w_q)?;
            let k = h1.matmul(&lp.w_k)?;
            let v = h1.matmul(&lp.w_v)?;
            let mut probs = vec![0.0f32; h * t * t];
            let mut attn_cat = Matrix::zeros(t, d);
            let mut scores = vec![0.0f64; t];
            for head in 0..h {
                let off = head * dh;
                for i in 0..t {
                    let qi = &q.row(i)[off..off + dh];
                    let mut mx = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                        let kj = &k.row(j)[off..off + dh];
                        *s = crate::numerics::dot(qi, kj) * scale;
                        mx = mx.max(*s);
                    }
                    let mut sum = 0.0;
                    for s in scores.iter_mut().take(i + 1) {
                        *s = (*s - mx).exp();
                        sum += *s;
                    }
                    let prow = &mut probs[(head * t + i) * t..(head * t + i + 1) * t];
                    let mut acc = vec![0.0f64; dh];
                    for j in 0..=i {
                        let pij = scores[j] / sum;
                        prow[j] = pij as f32;
                        let vj = &v.row(j)[off..off + dh];
                        for (a, &vv) in acc.iter_mut().zip(vj) {
                            *a += pij * vv as f64;
                        }
                    }
                    for (o, a) in attn_cat.row_mut(i)[off..off + dh].iter_mut().zip(acc) {
                        *o = a as f32;
                    }
                }
            }
            let attn_out = attn_cat.matmul(&lp.w_o)?;
            x.add_assign(&attn_out)?;

            let (mut ff_in, ln2_xhat, ln2_rstd) = layer_norm(&x, &lp.ln2_g, &lp.ln2_b);
            hook(HookPoint::new(li, HookSite::FfIn), &mut ff_in)?;
            check_shape(&ff_in, t, d, li, HookSite::FfIn)?;
            let pre = lp.ff.key_preactivations(&ff_in)?;
            let gate = lp.ff.gate_projections(&ff_in)?;
            let mut act = lp.ff.activate(&pre, gate.as_ref());
            hook(HookPoint::new(li, HookSite::FfNeuron), &mut act)?;
            check_shape(&act, t, cfg.d_ff, li, HookSite::FfNeuron)?;
            let mut ff_raw = act.matmul(&lp.ff.w_v)?;
            ff_raw.add_row_vector(&lp.ff.b_v);
            let mut ff_out = ff_raw.clone();
            lp.ff.apply_post_norm(&mut ff_out);
            hook(HookPoint::new(li, HookSite::FfOut), &mut ff_out)?;
            check_shape(&ff_out, t, d, li, HookSite::FfOut)?;
            x.add_assign(&ff_out)?;

            layers.push(LayerTrace {
                x_in,
                ln1_xhat,
                ln1_rstd,
                h1,
                q,
                k,
                v,
                probs,
                attn_cat,
                ln2_xhat,
                ln2_rstd,
                ff_in,
                pre,
                gate,
                act,
                ff_raw,
            });
        }
        let (lnf_out, lnf_xhat, lnf_rstd) = layer_norm(&x, &p.lnf_g, &p.lnf_b);
        let logits = lnf_out.matmul(&p.w_u)?;
        if !logits.is_finite() {
            return Err(Error::NonFinite("logits"));
        }
        Ok(Trace {
            tokens: tokens.to_vec(),
            layers,
            x_final: x,
            lnf_xhat,
            lnf_rstd,
            lnf_out,
            logits,
        })
    }

    /// Run the model, capturing the requested hook tensors and optionally
    /// replacing the tensor at one hook point before downstream use.
    pub fn forward_with_hooks(
        &self,
        tokens: &[u32],
        capture: &[HookPoint],
        inject: Option<(HookPoint, &Matrix)>,
    ) -> Result<ForwardOutput> {
        for &hp in capture {
            self.validate_hook(hp)?;
        }
        if let Some((hp, _)) = inject {
            self.validate_hook(hp)?;
        }
        let mut captures = BTreeMap::new();
        let trace = self.trace(tokens, &mut |hp, m| {
            if let Some((ihp, values)) = inject {
                if ihp == hp {
                    if values.shape() != m.shape() {
                        return Err(Error::shape(format!(
                            "injection at {hp} has shape {:?}, site is {:?}",
                            values.shape(),
                            m.shape()
                        )));
                    }
                    *m = values.clone();
                }
            }
            if capture.contains(&hp) {
                captures.insert(hp, m.clone());
            }
            Ok(())
        })?;
        Ok(ForwardOutput {
            logits: trace.logits,
            captures,
            final_residual: trace.x_final,
        })
    }

    /// Forward pass with an arbitrary in-place intervention callback.
    pub fn forward_with_intervention(
        &self,
        tokens: &[u32],
        mut intervene: impl FnMut(HookPoint, &mut Matrix) -> Result<()>,
    ) -> Result<ForwardOutput> {
        let trace = self.trace(tokens, &mut intervene)?;
        Ok(ForwardOutput {
            logits: trace.logits,
            captures: BTreeMap::new(),
            final_residual: trace.x_final,
        })
    }

    pub fn logits(&self, tokens: &[u32]) -> Result<Matrix> {
        Ok(self.trace(tokens, &mut |_, _| Ok(()))?.logits)
    }

    /// Greedy next-token prediction after `tokens`.
    pub fn greedy_next(&self, tokens: &[u32]) -> Result<u32> {
        let logits = self.logits(tokens)?;
        Ok(crate::numerics::argmax(logits.row(logits.rows() - 1)) as u32)
    }

    /// `[BOS] + encode(text)`, truncated to the context length.
    pub fn encode_prompt(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![self.tokenizer.bos()];
        ids.extend(self.tokenizer.encode(text));
        ids.truncate(self.config.context_length);
        ids
    }
}

fn check_shape(m: &Matrix, rows: usize, cols: usize, layer: usize, site: HookSite) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::shape(format!(
            "{} has shape {:?}, expected ({rows}, {cols})",
            HookPoint::new(layer, site),
            m.shape()
        )));
    }
    Ok(())
}
