//! Checkpoint container for models and trained coders.
//!
//! ```text
//! b"FFKVCKPT" | u32 LE version | u32 LE header length | JSON header
//!   | f32 LE tensor data, in header order | 32-byte SHA-256 of everything before it
//! ```
//!
//! FF-KV coders own no weights beyond the model's, so they are saved as a
//! binding record naming the layer, the variant and the digest of the model
//! they read from.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coders::{CoderBody, CoderKind, FeatureCoder, SparseActivation, SparseCoderWeights, TopKConfig};
use crate::error::{Error, Result};
use crate::lm::{Model, ModelConfig, Tokenizer};
use crate::numerics::Matrix;

const MAGIC: &[u8; 8] = b"FFKVCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CheckpointMeta {
    Model {
        config: ModelConfig,
        tokenizer: Tokenizer,
    },
    SparseCoder {
        coder_kind: CoderKind,
        layer: usize,
        source: String,
        activation: SparseActivationTag,
    },
    FfkvBinding {
        coder_kind: CoderKind,
        layer: usize,
        source: String,
        topk: Option<TopKConfig>,
        model_digest: String,
    },
}

/// The activation of a sparse coder without its per-feature tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SparseActivationTag {
    Relu,
    JumpRelu,
    TopK { k: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

fn write_container(path: &Path, meta: CheckpointMeta, tensors: &[(String, (usize, usize), &[f32])]) -> Result<()> {
    let header = Header {
        meta,
        tensors: tensors
            .iter()
            .map(|(n, (r, c), _)| TensorEntry {
                name: n.clone(),
                rows: *r,
                cols: *c,
            })
            .collect(),
    };
    let head = serde_json::to_vec(&header)?;
    let n: usize = tensors.iter().map(|t| t.2.len()).sum();
    let mut buf = Vec::with_capacity(16 + head.len() + 4 * n + 32);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(head.len() as u32).to_le_bytes());
    buf.extend_from_slice(&head);
    for (_, _, data) in tensors {
        for v in *data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

fn read_container(path: &Path) -> Result<(CheckpointMeta, BTreeMap<String, Matrix>)> {
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let buf = std::fs::read(path)?;
    if buf.len() < 16 + 32 || &buf[..8] != MAGIC {
        return Err(corrupt("missing checkpoint magic"));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
    let head = body.get(16..16 + hlen).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(head)?;
    let mut data = &body[16 + hlen..];
    let mut tensors = BTreeMap::new();
    for t in header.tensors {
        let n = t.rows * t.cols * 4;
        if data.len() < n {
            return Err(corrupt("tensor data is truncated"));
        }
        let vals: Vec<f32> = data[..n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(corrupt(&format!("tensor {} holds non-finite values", t.name)));
        }
        data = &data[n..];
        tensors.insert(t.name, Matrix::from_vec(t.rows, t.cols, vals)?);
    }
    if !data.is_empty() {
        return Err(corrupt("trailing bytes after the last tensor"));
    }
    Ok((header.meta, tensors))
}

/// Read only the metadata of a checkpoint.
pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    Ok(read_container(path)?.0)
}

/// Content digest of a model: configuration, vocabulary and every tensor.
pub fn model_digest(model: &Model) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&model.config).expect("config serializes"));
    h.update(serde_json::to_vec(&model.tokenizer).expect("tokenizer serializes"));
    model.params.for_each_tensor(|name, _, data| {
        h.update(name.as_bytes());
        for v in data {
            h.update(v.to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    let mut tensors = Vec::new();
    model
        .params
        .for_each_tensor(|name, shape, data| tensors.push((name.to_string(), shape, data)));
    write_container(
        path,
        CheckpointMeta::Model {
            config: model.config.clone(),
            tokenizer: model.tokenizer.clone(),
        },
        &tensors,
    )
}

pub fn load_model(path: &Path) -> Result<Model> {
    let (meta, mut tensors) = read_container(path)?;
    let CheckpointMeta::Model { config, mut tokenizer } = meta else {
        return Err(Error::invalid(format!("{} is not a model checkpoint", path.display())));
    };
    tokenizer.rebuild_index();
    let mut model = Model::random_init(&config, tokenizer)?;
    let mut missing = Vec::new();
    let mut wrong = Vec::new();
    model.params.for_each_tensor_mut(|name, dst| match tensors.remove(name) {
        Some(m) if m.data().len() == dst.len() => dst.copy_from_slice(m.data()),
        Some(_) => wrong.push(name.to_string()),
        None => missing.push(name.to_string()),
    });
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if !missing.is_empty() || !wrong.is_empty() {
        return Err(corrupt(format!("missing tensors {missing:?}, mis-sized tensors {wrong:?}")));
    }
    if !tensors.is_empty() {
        return Err(corrupt(format!("unexpected tensors {:?}", tensors.keys().collect::<Vec<_>>())));
    }
    Ok(model)
}

/// Save any coder; FF-KV variants become a binding to `model`.
pub fn save_coder(path: &Path, coder: &FeatureCoder, model: Option<&Model>) -> Result<()> {
    let source = coder.handle().source;
    match coder.body() {
        CoderBody::FfKv { topk, .. } => {
            let model = model.ok_or_else(|| Error::invalid("saving an FF-KV coder needs its model"))?;
            write_container(
                path,
                CheckpointMeta::FfkvBinding {
                    coder_kind: coder.kind(),
                    layer: coder.layer(),
                    source,
                    topk: *topk,
                    model_digest: model_digest(model),
                },
                &[],
            )
        }
        CoderBody::Sparse(w) => {
            let (tag, theta) = match &w.activation {
                SparseActivation::Relu => (SparseActivationTag::Relu, None),
                SparseActivation::JumpRelu { theta } => (SparseActivationTag::JumpRelu, Some(theta)),
                SparseActivation::TopK { k } => (SparseActivationTag::TopK { k: *k }, None),
            };
            let mut tensors: Vec<(String, (usize, usize), &[f32])> = vec![
                ("w_enc".into(), w.w_enc.shape(), w.w_enc.data()),
                ("b_enc".into(), (1, w.b_enc.len()), &w.b_enc),
                ("w_dec".into(), w.w_dec.shape(), w.w_dec.data()),
                ("b_dec".into(), (1, w.b_dec.len()), &w.b_dec),
            ];
            if let Some(t) = theta {
                tensors.push(("theta".into(), (1, t.len()), t));
            }
            write_container(
                path,
                CheckpointMeta::SparseCoder {
                    coder_kind: coder.kind(),
                    layer: coder.layer(),
                    source,
                    activation: tag,
                },
                &tensors,
            )
        }
    }
}

/// Load a coder; FF-KV bindings are resolved against `model`, whose digest
/// must match the one recorded at save time.
pub fn load_coder(path: &Path, model: Option<&Model>) -> Result<FeatureCoder> {
    let (meta, mut t) = read_container(path)?;
    let mut take = |name: &str| {
        t.remove(name).ok_or_else(|| Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("missing tensor {name}"),
        })
    };
    match meta {
        CheckpointMeta::Model { .. } => Err(Error::invalid(format!("{} holds a model, not a coder", path.display()))),
        CheckpointMeta::FfkvBinding {
            coder_kind,
            layer,
            source,
            topk,
            model_digest: want,
        } => {
            let model = model.ok_or_else(|| Error::invalid("an FF-KV binding needs its model to load"))?;
            let got = model_digest(model);
            if got != want {
                return Err(Error::invalid(format!(
                    "FF-KV binding expects model {want}, got {got}"
                )));
            }
            let normalized = matches!(coder_kind, CoderKind::NormFfkv | CoderKind::TopkNormFfkv);
            let c = FeatureCoder::from_ff(model.ff(layer)?.clone(), layer, topk, normalized)?;
            if c.kind() != coder_kind {
                return Err(Error::invalid(format!("binding kind {coder_kind} disagrees with its fields")));
            }
            Ok(c.with_source(source))
        }
        CheckpointMeta::SparseCoder {
            coder_kind,
            layer,
            source,
            activation,
        } => {
            let row = |m: Matrix| m.into_vec();
            let activation = match activation {
                SparseActivationTag::Relu => SparseActivation::Relu,
                SparseActivationTag::JumpRelu => SparseActivation::JumpRelu {
                    theta: row(take("theta")?),
                },
                SparseActivationTag::TopK { k } => SparseActivation::TopK { k },
            };
            let w = SparseCoderWeights {
                w_enc: take("w_enc")?,
                b_enc: row(take("b_enc")?),
                w_dec: take("w_dec")?,
                b_dec: row(take("b_dec")?),
                activation,
            };
            Ok(FeatureCoder::from_sparse(coder_kind, layer, w)?.with_source(source))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ActivationKind;
    use crate::numerics::RngStream;

    fn model(act: ActivationKind) -> Model {
        let tok = Tokenizer::word_level(["x y z"]);
        let mut cfg = ModelConfig::desk(tok.vocab_size());
        cfg.d_model = 8;
        cfg.d_ff = 16;
        cfg.n_heads = 2;
        cfg.activation = act;
        cfg.post_ff_norm = act == ActivationKind::Relu;
        cfg.key_bias = act == ActivationKind::Relu;
        Model::random_init(&cfg, tok).unwrap()
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for act in [ActivationKind::Swiglu, ActivationKind::Relu] {
            let m = model(act);
            let p = dir.path().join("m.ckpt");
            save_model(&p, &m).unwrap();
            let back = load_model(&p).unwrap();
            assert_eq!(back, m);
            assert_eq!(model_digest(&back), model_digest(&m));
            assert_eq!(back.tokenizer.encode("y z"), m.tokenizer.encode("y z"));
        }
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_model(&p, &model(ActivationKind::Relu)).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 100] ^= 0x10;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_model(&p), Err(Error::Corrupt { .. })));
        bytes[8] = 9;
        std::fs::write(&p, &bytes).unwrap();
        assert!(load_model(&p).is_err());
    }

    #[test]
    fn sparse_coders_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = RngStream::new(1, 0);
        for act in [
            SparseActivation::Relu,
            SparseActivation::JumpRelu { theta: vec![0.01; 6] },
            SparseActivation::TopK { k: 2 },
        ] {
            let w = SparseCoderWeights {
                w_enc: rng.normal_matrix(4, 6, 1.0),
                b_enc: rng.normal_vec(6, 0.1),
                w_dec: rng.normal_matrix(6, 4, 1.0),
                b_dec: rng.normal_vec(4, 0.1),
                activation: act,
            };
            let c = FeatureCoder::from_sparse(CoderKind::Transcoder, 1, w).unwrap().with_source("t");
            let p = dir.path().join("c.ckpt");
            save_coder(&p, &c, None).unwrap();
            assert_eq!(load_coder(&p, None).unwrap(), c);
        }
    }

    #[test]
    fn ffkv_bindings_check_the_model() {
        let dir = tempfile::tempdir().unwrap();
        let m = model(ActivationKind::Swiglu);
        let c = FeatureCoder::topk_norm_ffkv(&m, 1, TopKConfig::with_k(3)).unwrap();
        let p = dir.path().join("b.ckpt");
        save_coder(&p, &c, Some(&m)).unwrap();
        assert_eq!(load_coder(&p, Some(&m)).unwrap(), c);
        let other = model(ActivationKind::Relu);
        assert!(load_coder(&p, Some(&other)).is_err());
        assert!(load_coder(&p, None).is_err());
    }
}
