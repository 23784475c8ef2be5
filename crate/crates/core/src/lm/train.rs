use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::backprop::loss_and_grads;
use super::model::Model;
use super::{ModelConfig, Tokenizer};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, log_softmax, AdamHyper, AdamState, RngStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 16,
            learning_rate: 3e-3,
            warmup_steps: 30,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean training loss per step.
    pub losses: Vec<f64>,
}

/// Build a model from `config` and train it on `docs` (token ids without
/// the BOS marker).
pub fn train_lm(
    config: &ModelConfig,
    tokenizer: Tokenizer,
    docs: &[Vec<u32>],
    train: &TrainConfig,
) -> Result<(Model, TrainLog)> {
    let model = Model::random_init(config, tokenizer)?;
    train_model(model, docs, train)
}

fn sample_sequence(model: &Model, doc: &[u32], rng: &mut RngStream) -> Vec<u32> {
    let ctx = model.config.context_length;
    let mut seq = vec![model.tokenizer.bos()];
    if doc.len() < ctx {
        seq.extend_from_slice(doc);
    } else {
        let start = rng.below(doc.len() - (ctx - 1) + 1);
        seq.extend_from_slice(&doc[start..start + ctx - 1]);
    }
    seq
}

/// Continue training an existing model. `steps = 0` returns it unchanged.
pub fn train_model(mut model: Model, docs: &[Vec<u32>], train: &TrainConfig) -> Result<(Model, TrainLog)> {
    let docs: Vec<&Vec<u32>> = docs.iter().filter(|d| !d.is_empty()).collect();
    if docs.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    if train.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut log = TrainLog::default();
    if train.steps == 0 {
        return Ok((model, log));
    }
    let mut states: Vec<AdamState> = Vec::new();
    model
        .params
        .for_each_tensor(|_, _, t| states.push(AdamState::new(t.len())));
    let mut rng = RngStream::new(train.seed, 0x7a11);

    for step in 0..train.steps {
        let seqs: Vec<Vec<u32>> = (0..train.batch_size)
            .map(|_| {
                let doc = docs[rng.below(docs.len())];
                sample_sequence(&model, doc, &mut rng)
            })
            .collect();
        let results: Vec<(f64, usize, super::model::Params)> = seqs
            .par_iter()
            .map(|seq| {
                let trace = model.trace(seq, &mut |_, _| Ok(()))?;
                loss_and_grads(&model, &trace)
            })
            .collect::<Result<_>>()?;

        let mut total_loss = 0.0;
        let mut total_count = 0usize;
        let mut grads = model.params.zeros_like();
        for (l, c, g) in &results {
            total_loss += l;
            total_count += c;
            grads.accumulate(g);
        }
        if total_count == 0 {
            continue;
        }
        let inv = 1.0 / total_count as f64;
        let mut sq = 0.0f64;
        grads.for_each_tensor_mut(|_, t| {
            for v in t.iter_mut() {
                *v = (*v as f64 * inv) as f32;
                sq += (*v as f64).powi(2);
            }
        });
        let norm = sq.sqrt();
        if norm > train.grad_clip {
            let s = (train.grad_clip / norm) as f32;
            grads.for_each_tensor_mut(|_, t| t.iter_mut().for_each(|v| *v *= s));
        }
        let lr = learning_rate_at(train, step);
        let hyper = AdamHyper {
            lr,
            ..AdamHyper::default()
        };
        let mut gslices: Vec<Vec<f32>> = Vec::new();
        grads.for_each_tensor(|_, _, t| gslices.push(t.to_vec()));
        let mut i = 0;
        let mut err = None;
        model.params.for_each_tensor_mut(|_, t| {
            if let Err(e) = adam_step(t, &gslices[i], &mut states[i], &hyper) {
                err.get_or_insert(e);
            }
            i += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        log.losses.push(total_loss * inv);
    }
    Ok((model, log))
}

fn learning_rate_at(train: &TrainConfig, step: usize) -> f64 {
    let warm = train.warmup_steps.max(1);
    if step < warm {
        return train.learning_rate * (step + 1) as f64 / warm as f64;
    }
    let progress = (step - warm) as f64 / (train.steps.saturating_sub(warm)).max(1) as f64;
    // cosine decay to 10% of the peak rate
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    train.learning_rate * (0.1 + 0.9 * cos)
}

/// Mean next-token cross-entropy (nats) over documents, each prefixed by BOS.
pub fn cross_entropy(model: &Model, docs: &[Vec<u32>]) -> Result<f64> {
    let ctx = model.config.context_length;
    let parts: Vec<(f64, usize)> = docs
        .par_iter()
        .filter(|d| !d.is_empty())
        .map(|doc| {
            let mut total = 0.0;
            let mut count = 0;
            for chunk in doc.chunks(ctx - 1) {
                let mut seq = vec![model.tokenizer.bos()];
                seq.extend_from_slice(chunk);
                let logits = model.logits(&seq)?;
                for i in 0..seq.len() - 1 {
                    total -= log_softmax(logits.row(i))[seq[i + 1] as usize];
                    count += 1;
                }
            }
            Ok((total, count))
        })
        .collect::<Result<_>>()?;
    let (total, count) = parts
        .iter()
        .fold((0.0, 0), |(t, c), (pt, pc)| (t + pt, c + pc));
    if count == 0 {
        return Err(Error::Empty("evaluation corpus"));
    }
    Ok(total / count as f64)
}

/// Entropy (nats) of the unigram token distribution of `docs`.
pub fn unigram_entropy(docs: &[Vec<u32>]) -> Result<f64> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    let mut n = 0usize;
    for d in docs {
        for &t in d {
            *counts.entry(t).or_default() += 1;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("corpus"));
    }
    Ok(-counts
        .values()
        .map(|&c| {
            let p = c as f64 / n as f64;
            p * p.ln()
        })
        .sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unigram_entropy_of_uniform_pair_is_ln2() {
        let h = unigram_entropy(&[vec![1, 2, 1, 2]]).unwrap();
        assert!((h - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(unigram_entropy(&[vec![]]).is_err());
    }

    #[test]
    fn warmup_then_decay() {
        let cfg = TrainConfig {
            steps: 100,
            warmup_steps: 10,
            learning_rate: 1.0,
            ..Default::default()
        };
        assert!((learning_rate_at(&cfg, 0) - 0.1).abs() < 1e-12);
        assert!((learning_rate_at(&cfg, 9) - 1.0).abs() < 1e-12);
        assert!(learning_rate_at(&cfg, 99) < 0.2);
    }
}
