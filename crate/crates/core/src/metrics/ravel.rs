//! RAVEL-lite: feature patching at the entity token of an entity-attribute
//! world, scored by causality (the target attribute takes the source's
//! value) and isolation (every other attribute keeps the base's value).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::splice::{Splice, SpliceMode};
use crate::coders::FeatureCoder;
use crate::datasets::EntityAttributeWorld;
use crate::error::{Error, Result};
use crate::lm::Model;
use crate::numerics::{argmax, Matrix, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RavelIntervention {
    /// Leave the model untouched.
    Noop,
    /// Overwrite the decoded target answer with the source value.
    Oracle,
    /// Copy the top-`k` attributed features from the source prompt.
    FeaturePatch { k: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RavelConfig {
    pub n_samples: usize,
    pub recall_threshold: f64,
    pub seed: u64,
}

impl Default for RavelConfig {
    fn default() -> Self {
        Self {
            n_samples: 60,
            recall_threshold: 0.95,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RavelLogEntry {
    pub base: usize,
    pub source: usize,
    pub attribute: usize,
    /// Decoded answer for every attribute query of the base entity.
    pub predictions: Vec<String>,
    pub caused: bool,
    pub isolated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RavelResult {
    pub intervention: RavelIntervention,
    pub recall: f64,
    pub isolation: f64,
    pub causality: f64,
    pub log: Vec<RavelLogEntry>,
}

struct Prompt {
    tokens: Vec<u32>,
    entity_pos: usize,
}

fn prompt(model: &Model, world: &EntityAttributeWorld, e: usize, a: usize) -> Result<Prompt> {
    let tokens = model.encode_prompt(&world.query(e, a));
    if tokens.len() < 2 {
        return Err(Error::invalid("query prompt is empty"));
    }
    Ok(Prompt {
        entity_pos: tokens.len() - 1,
        tokens,
    })
}

/// Greedy continuation of `n` tokens, re-applying `edit` on every step.
fn greedy(
    splice: &Splice<'_>,
    p: &Prompt,
    n: usize,
    edit: Option<&(dyn Fn(usize, &mut [f32]) + Sync)>,
) -> Result<Vec<u32>> {
    let mut toks = p.tokens.clone();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let fwd = match edit {
            None => splice.model.forward_with_hooks(&toks, &[], None)?,
            Some(f) => splice
                .forward_edited(&toks, SpliceMode::PreserveError, &mut |pos, a| f(pos, a))?,
        };
        let next = argmax(fwd.logits.row(fwd.logits.rows() - 1)) as u32;
        out.push(next);
        toks.push(next);
        if toks.len() > splice.model.config.context_length {
            break;
        }
    }
    Ok(out)
}

/// Mean absolute deviation from the entity mean, per feature.
fn attribute_scores(acts: &Matrix) -> Vec<f64> {
    let mean = acts.column_means();
    let n = acts.rows() as f64;
    let mut s = vec![0.0f64; acts.cols()];
    for row in acts.row_iter() {
        for ((o, &v), m) in s.iter_mut().zip(row).zip(&mean) {
            *o += (v as f64 - m).abs();
        }
    }
    s.iter().map(|v| v / n).collect()
}

pub fn ravel_eval(
    model: &Model,
    coder: &FeatureCoder,
    world: &EntityAttributeWorld,
    intervention: RavelIntervention,
    cfg: &RavelConfig,
) -> Result<RavelResult> {
    let (ne, na) = (world.n_entities(), world.n_attributes());
    if ne < 2 || na < 2 {
        return Err(Error::Empty("entity-attribute world (needs 2 entities and 2 attributes)"));
    }
    let splice = Splice::new(model, coder)?;
    let values: Vec<Vec<Vec<u32>>> = world
        .values
        .iter()
        .map(|vs| vs.iter().map(|v| model.tokenizer.encode(v)).collect())
        .collect();
    let prompts: Vec<Vec<Prompt>> = (0..ne)
        .map(|e| (0..na).map(|a| prompt(model, world, e, a)).collect())
        .collect::<Result<_>>()?;

    // recall gate on the unedited model
    let pairs: Vec<(usize, usize)> = (0..ne).flat_map(|e| (0..na).map(move |a| (e, a))).collect();
    let correct: Vec<bool> = pairs
        .par_iter()
        .map(|&(e, a)| Ok(greedy(&splice, &prompts[e][a], values[e][a].len(), None)? == values[e][a]))
        .collect::<Result<_>>()?;
    let recall = correct.iter().filter(|&&c| c).count() as f64 / pairs.len() as f64;
    if recall < cfg.recall_threshold {
        return Err(Error::Aborted(format!(
            "attribute recall {recall:.3} is below {:.3}; train the model longer or on more fact repeats",
            cfg.recall_threshold
        )));
    }
    let known: Vec<usize> = (0..ne).filter(|&e| (0..na).all(|a| correct[e * na + a])).collect();
    if known.len() < 2 {
        return Err(Error::Aborted("fewer than two fully recalled entities".into()));
    }

    // entity-token activations of every query, and per-attribute rankings
    let acts: Vec<Vec<Vec<f32>>> = (0..ne)
        .into_par_iter()
        .map(|e| {
            (0..na)
                .map(|a| {
                    let p = &prompts[e][a];
                    Ok(splice.features(&p.tokens)?.row(p.entity_pos).to_vec())
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let ranking: Vec<Vec<usize>> = (0..na)
        .map(|a| {
            let rows: Vec<Vec<f32>> = (0..ne).map(|e| acts[e][a].clone()).collect();
            let scores = attribute_scores(&Matrix::from_rows(&rows)?);
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&x, &y| scores[y].total_cmp(&scores[x]).then(x.cmp(&y)));
            Ok(order)
        })
        .collect::<Result<_>>()?;

    let mut rng = RngStream::new(cfg.seed, 0x7a5e1);
    let samples: Vec<(usize, usize, usize)> = (0..cfg.n_samples)
        .map(|_| {
            let bi = rng.below(known.len());
            let mut si = rng.below(known.len() - 1);
            if si >= bi {
                si += 1;
            }
            let (b, s) = (known[bi], known[si]);
            (b, s, rng.below(na))
        })
        .collect();

    let log: Vec<RavelLogEntry> = samples
        .par_iter()
        .map(|&(b, s, t)| {
            let mut preds = Vec::with_capacity(na);
            for q in 0..na {
                let want = values[b][q].len();
                let got = match intervention {
                    RavelIntervention::Oracle if q == t => values[s][q].clone(),
                    RavelIntervention::Noop | RavelIntervention::Oracle => {
                        greedy(&splice, &prompts[b][q], want, None)?
                    }
                    RavelIntervention::FeaturePatch { k } => {
                        let feats = &ranking[t][..k.min(coder.d_coder())];
                        let src = &acts[s][q];
                        let pos = prompts[b][q].entity_pos;
                        let edit = |p: usize, a: &mut [f32]| {
                            if p == pos {
                                for &j in feats {
                                    a[j] = src[j];
                                }
                            }
                        };
                        let n = want.max(values[s][q].len());
                        greedy(&splice, &prompts[b][q], n, Some(&edit))?
                    }
                };
                preds.push(got);
            }
            let matches = |pred: &[u32], v: &[u32]| pred.len() >= v.len() && pred[..v.len()] == *v;
            let caused = matches(&preds[t], &values[s][t]);
            let isolated = (0..na).filter(|&q| q != t).all(|q| matches(&preds[q], &values[b][q]));
            Ok(RavelLogEntry {
                base: b,
                source: s,
                attribute: t,
                predictions: preds.iter().map(|p| model.tokenizer.decode(p)).collect(),
                caused,
                isolated,
            })
        })
        .collect::<Result<_>>()?;

    let n = log.len().max(1) as f64;
    Ok(RavelResult {
        intervention,
        recall,
        isolation: log.iter().filter(|l| l.isolated).count() as f64 / n,
        causality: log.iter().filter(|l| l.caused).count() as f64 / n,
        log,
    })
}
