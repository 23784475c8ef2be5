//! Spurious correlation removal (SCR) and targeted probe perturbation (TPP).
//!
//! Both rank features by `mean |activation| × |effect · w|`, where `w` is a
//! probe's raw-space direction and `effect` is the feature's write direction
//! in representation space, then zero-ablate the top K and re-measure probe
//! accuracy. Neither the base nor the per-class probes are refit after
//! ablation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::probing::pooled_features;
use super::splice::{Splice, SpliceMode};
use crate::datasets::{LabeledTextSet, Split};
use crate::error::{Error, Result};
use crate::numerics::{fit_linear_probe, Matrix, ProbeConfig, ProbeModel};

/// The K grid always reported for SCR.
pub const SCR_K_GRID: [usize; 7] = [2, 5, 10, 20, 50, 100, 500];

/// Something whose pooled text representations can be recomputed with a
/// set of features zeroed.
pub trait AblationTarget: Sync {
    fn n_features(&self) -> usize;
    /// One representation row per listed text.
    fn representations(&self, texts: &[usize], ablate: &[usize]) -> Result<Matrix>;
    /// Pooled feature activations, one row per listed text.
    fn feature_activations(&self, texts: &[usize]) -> Result<Matrix>;
    /// Write direction of every feature in representation space.
    fn feature_effects(&self) -> Matrix;
}

/// Feature activations used directly as the representation.
pub struct DirectFeatures {
    pub activations: Matrix,
}

impl AblationTarget for DirectFeatures {
    fn n_features(&self) -> usize {
        self.activations.cols()
    }

    fn representations(&self, texts: &[usize], ablate: &[usize]) -> Result<Matrix> {
        let mut m = self.feature_activations(texts)?;
        for r in 0..m.rows() {
            let row = m.row_mut(r);
            for &j in ablate {
                row[j] = 0.0;
            }
        }
        Ok(m)
    }

    fn feature_activations(&self, texts: &[usize]) -> Result<Matrix> {
        if let Some(&bad) = texts.iter().find(|&&t| t >= self.activations.rows()) {
            return Err(Error::OutOfRange {
                index: bad,
                len: self.activations.rows(),
            });
        }
        Ok(self.activations.select_rows(texts))
    }

    fn feature_effects(&self) -> Matrix {
        Matrix::identity(self.activations.cols())
    }
}

/// Texts run through the model with a coder spliced in; the representation
/// is the mean final residual and a feature's effect is its decoder row.
pub struct SplicedTexts<'a> {
    pub splice: Splice<'a>,
    pub texts: Vec<String>,
    pub mode: SpliceMode,
    tokens: Vec<Vec<u32>>,
    pooled: Matrix,
}

impl<'a> SplicedTexts<'a> {
    pub fn new(splice: Splice<'a>, texts: Vec<String>, mode: SpliceMode) -> Result<Self> {
        let tokens = texts.iter().map(|t| splice.model.encode_prompt(t)).collect();
        let pooled = pooled_features(&splice, &texts)?;
        Ok(Self {
            splice,
            texts,
            mode,
            tokens,
            pooled,
        })
    }
}

impl AblationTarget for SplicedTexts<'_> {
    fn n_features(&self) -> usize {
        self.splice.coder.d_coder()
    }

    fn representations(&self, texts: &[usize], ablate: &[usize]) -> Result<Matrix> {
        let rows: Vec<Vec<f32>> = texts
            .par_iter()
            .map(|&t| {
                let toks = self.tokens.get(t).ok_or(Error::OutOfRange {
                    index: t,
                    len: self.tokens.len(),
                })?;
                self.splice.pooled_residual(toks, self.mode, ablate)
            })
            .collect::<Result<_>>()?;
        Matrix::from_rows(&rows)
    }

    fn feature_activations(&self, texts: &[usize]) -> Result<Matrix> {
        Ok(self.pooled.select_rows(texts))
    }

    fn feature_effects(&self) -> Matrix {
        self.splice.coder.dictionary().clone()
    }
}

/// `|mean_t |h_j(t)| × effect_j · w|` for every feature.
fn attribution(acts: &Matrix, effects: &Matrix, w: &[f64]) -> Vec<f64> {
    let n = acts.rows().max(1) as f64;
    let mut mean_abs = vec![0.0f64; acts.cols()];
    for row in acts.row_iter() {
        for (m, &v) in mean_abs.iter_mut().zip(row) {
            *m += (v as f64).abs();
        }
    }
    effects
        .row_iter()
        .zip(&mean_abs)
        .map(|(e, &m)| {
            let proj: f64 = e.iter().zip(w).map(|(&a, &b)| a as f64 * b).sum();
            (m / n * proj).abs()
        })
        .collect()
}

fn top_by(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScrResult {
    pub k: usize,
    pub a_base: f64,
    pub a_abl: f64,
    pub a_oracle: f64,
    /// `None` when `A_oracle = A_base`.
    pub score: Option<f64>,
    pub ablated: Vec<usize>,
}

/// `(A_abl − A_base)/(A_oracle − A_base)`, undefined when the denominator is 0.
pub fn scr_score(a_base: f64, a_abl: f64, a_oracle: f64) -> Option<f64> {
    let den = a_oracle - a_base;
    if den == 0.0 {
        None
    } else {
        Some((a_abl - a_base) / den)
    }
}

struct ScrSetup {
    base: ProbeModel,
    test: Vec<usize>,
    test_y: Vec<usize>,
    a_base: f64,
    a_oracle: f64,
    ranking: Vec<usize>,
}

fn scr_setup(target: &dyn AblationTarget, set: &LabeledTextSet, probe: &ProbeConfig) -> Result<ScrSetup> {
    let spurious = set
        .spurious
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("{} has no spurious labels", set.name)))?;
    let train = set.indices(Split::Train);
    // split eval into an oracle-training half and a test half, alternating
    // within each (label, spurious) quadrant so both halves stay balanced
    let mut seen: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let (mut oracle_tr, mut test) = (Vec::new(), Vec::new());
    for i in set.indices(Split::Eval) {
        let c = seen.entry((set.labels[i], spurious[i])).or_default();
        if *c % 2 == 0 {
            oracle_tr.push(i)
        } else {
            test.push(i)
        }
        *c += 1;
    }
    if train.is_empty() || oracle_tr.is_empty() || test.is_empty() {
        return Err(Error::invalid("SCR needs train rows and at least two eval rows per quadrant"));
    }
    let labels = |idx: &[usize]| idx.iter().map(|&i| set.labels[i]).collect::<Vec<_>>();
    let reps_train = target.representations(&train, &[])?;
    let reps_oracle = target.representations(&oracle_tr, &[])?;
    let reps_test = target.representations(&test, &[])?;
    let test_y = labels(&test);

    let base = fit_linear_probe(&reps_train, &labels(&train), probe)?;
    let oracle = fit_linear_probe(&reps_oracle, &labels(&oracle_tr), probe)?;
    let spur_y: Vec<usize> = oracle_tr.iter().map(|&i| spurious[i]).collect();
    let spur = fit_linear_probe(&reps_oracle, &spur_y, probe)?;

    let acts = target.feature_activations(&train)?;
    let scores = attribution(&acts, &target.feature_effects(), &spur.binary_direction());
    Ok(ScrSetup {
        a_base: base.accuracy(&reps_test, &test_y),
        a_oracle: oracle.accuracy(&reps_test, &test_y),
        ranking: top_by(&scores, target.n_features()),
        base,
        test,
        test_y,
    })
}

/// SCR at every budget in `ks`, sharing probes and the attribution ranking.
pub fn scr_eval_grid(
    target: &dyn AblationTarget,
    set: &LabeledTextSet,
    ks: &[usize],
    probe: &ProbeConfig,
) -> Result<Vec<ScrResult>> {
    let s = scr_setup(target, set, probe)?;
    ks.iter()
        .map(|&k| {
            let ablated: Vec<usize> = s.ranking.iter().copied().take(k).collect();
            let reps = target.representations(&s.test, &ablated)?;
            let a_abl = s.base.accuracy(&reps, &s.test_y);
            Ok(ScrResult {
                k,
                a_base: s.a_base,
                a_abl,
                a_oracle: s.a_oracle,
                score: scr_score(s.a_base, a_abl, s.a_oracle),
                ablated,
            })
        })
        .collect()
}

pub fn scr_eval(
    target: &dyn AblationTarget,
    set: &LabeledTextSet,
    k: usize,
    probe: &ProbeConfig,
) -> Result<ScrResult> {
    Ok(scr_eval_grid(target, set, &[k], probe)?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TppResult {
    pub m: usize,
    pub k: usize,
    /// Baseline accuracy of probe `j`.
    pub a: Vec<f64>,
    /// `a_cross[i][j]`: accuracy of probe `j` after ablating class `i`'s features.
    pub a_cross: Vec<Vec<f64>>,
    /// Targeted damage minus untargeted damage (positive is better).
    pub score: f64,
    /// The same quantity with the opposite sign convention.
    pub score_opposite_sign: f64,
}

/// `(1/m)Σ(A_i − A_ii) − (1/(m(m−1)))Σ_{i≠j}(A_j − A_ij)`.
pub fn tpp_score(a: &[f64], a_cross: &[Vec<f64>]) -> Result<f64> {
    let m = a.len();
    if m < 2 || a_cross.len() != m || a_cross.iter().any(|r| r.len() != m) {
        return Err(Error::shape("TPP needs an m×m cross matrix with m ≥ 2"));
    }
    let mut targeted = 0.0;
    let mut other = 0.0;
    for i in 0..m {
        for j in 0..m {
            let drop = a[j] - a_cross[i][j];
            if i == j {
                targeted += drop;
            } else {
                other += drop;
            }
        }
    }
    Ok(targeted / m as f64 - other / (m * (m - 1)) as f64)
}

/// Per-class one-vs-rest probes, per-class top-K ablation, full cross matrix.
pub fn tpp_eval(
    target: &dyn AblationTarget,
    set: &LabeledTextSet,
    k: usize,
    probe: &ProbeConfig,
) -> Result<TppResult> {
    let m = set.n_classes;
    if m < 3 {
        return Err(Error::invalid(format!("TPP needs at least 3 classes, got {m}")));
    }
    let train = set.indices(Split::Train);
    let eval = set.indices(Split::Eval);
    let reps_train = target.representations(&train, &[])?;
    let acts = target.feature_activations(&train)?;
    let effects = target.feature_effects();

    // balanced eval subset per class: its texts plus as many others, in order
    let eval_sets: Vec<Vec<usize>> = (0..m)
        .map(|c| {
            let pos: Vec<usize> = eval.iter().copied().filter(|&i| set.labels[i] == c).collect();
            let neg: Vec<usize> = eval
                .iter()
                .copied()
                .filter(|&i| set.labels[i] != c)
                .take(pos.len())
                .collect();
            pos.into_iter().chain(neg).collect()
        })
        .collect();

    let mut probes = Vec::with_capacity(m);
    let mut ablations = Vec::with_capacity(m);
    for c in 0..m {
        let y: Vec<usize> = train.iter().map(|&i| (set.labels[i] == c) as usize).collect();
        let p = fit_linear_probe(&reps_train, &y, probe)
            .map_err(|e| Error::invalid(format!("class {c} probe: {e}")))?;
        let rows: Vec<usize> = (0..train.len()).filter(|&r| y[r] == 1).collect();
        let scores = attribution(&acts.select_rows(&rows), &effects, &p.binary_direction());
        ablations.push(top_by(&scores, k));
        probes.push(p);
    }
    let acc = |j: usize, reps: &Matrix, idx: &[usize]| -> f64 {
        let pos: BTreeMap<usize, usize> = eval.iter().enumerate().map(|(r, &i)| (i, r)).collect();
        let rows: Vec<usize> = idx.iter().map(|i| pos[i]).collect();
        let y: Vec<usize> = idx.iter().map(|&i| (set.labels[i] == j) as usize).collect();
        probes[j].accuracy(&reps.select_rows(&rows), &y)
    };
    let base = target.representations(&eval, &[])?;
    let a: Vec<f64> = (0..m).map(|j| acc(j, &base, &eval_sets[j])).collect();
    let mut a_cross = Vec::with_capacity(m);
    for abl in &ablations {
        let reps = target.representations(&eval, abl)?;
        a_cross.push((0..m).map(|j| acc(j, &reps, &eval_sets[j])).collect::<Vec<_>>());
    }
    let score = tpp_score(&a, &a_cross)?;
    Ok(TppResult {
        m,
        k,
        a,
        a_cross,
        score,
        score_opposite_sign: -score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn scr_fixed_points() {
        assert_eq!(scr_score(0.6, 0.6, 0.9), Some(0.0));
        assert_eq!(scr_score(0.6, 0.9, 0.9), Some(1.0));
        assert_eq!(scr_score(0.7, 0.9, 0.7), None);
        assert!(scr_score(0.6, 0.5, 0.9).unwrap() < 0.0);
    }

    #[test]
    fn tpp_formula_patterns() {
        let a = vec![0.9, 0.8, 0.95, 0.85];
        let none: Vec<Vec<f64>> = (0..4).map(|_| a.clone()).collect();
        assert_eq!(tpp_score(&a, &none).unwrap(), 0.0);
        let delta = 0.3;
        let diag: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| if i == j { a[j] - delta } else { a[j] }).collect())
            .collect();
        assert!((tpp_score(&a, &diag).unwrap() - delta).abs() < 1e-9);
        let uniform: Vec<Vec<f64>> = (0..4).map(|_| a.iter().map(|v| v - delta).collect()).collect();
        assert!(tpp_score(&a, &uniform).unwrap().abs() < 1e-12);
    }

    /// Feature 0 carries the intended concept, feature 1 the spurious one.
    pub(crate) fn planted_spurious(seed: u64) -> (DirectFeatures, LabeledTextSet) {
        let mut rng = RngStream::new(seed, 3);
        let (n_train, n_eval) = (400, 400);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut spurious = Vec::new();
        let mut splits = Vec::new();
        for i in 0..n_train + n_eval {
            let (a, b, split) = if i < n_train {
                let a = i % 2;
                (a, a, Split::Train)
            } else {
                let j = i - n_train;
                (j % 2, (j / 2) % 2, Split::Eval)
            };
            let sign = |v: usize| if v == 1 { 1.0 } else { -1.0 };
            let mut row = vec![
                sign(a) + 0.8 * rng.normal() as f32,
                sign(b) * 3.0 + 0.1 * rng.normal() as f32,
            ];
            row.extend(rng.normal_vec(6, 0.3));
            rows.push(row);
            labels.push(a);
            spurious.push(b);
            splits.push(split);
        }
        let set = LabeledTextSet {
            name: "planted".into(),
            texts: vec![String::new(); rows.len()],
            labels,
            n_classes: 2,
            splits,
            spurious: Some(spurious),
            bias: Some(1.0),
        };
        (
            DirectFeatures {
                activations: Matrix::from_rows(&rows).unwrap(),
            },
            set,
        )
    }

    #[test]
    fn planted_spurious_latent_is_removed_at_k1() {
        let (target, set) = planted_spurious(0);
        let r = scr_eval(&target, &set, 1, &ProbeConfig::default()).unwrap();
        assert_eq!(r.ablated, vec![1]);
        assert!(r.a_oracle > r.a_base + 0.1, "{r:?}");
        assert!(r.score.unwrap() >= 0.9, "{r:?}");
    }

    #[test]
    fn class_indicator_coder_has_targeted_damage() {
        let m = 4;
        let mut rng = RngStream::new(5, 0);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut splits = Vec::new();
        for i in 0..m * 60 {
            let c = i % m;
            let mut row = rng.normal_vec(m + 2, 0.2);
            row[c] += 2.0;
            rows.push(row);
            labels.push(c);
            splits.push(if i < m * 40 { Split::Train } else { Split::Eval });
        }
        let set = LabeledTextSet {
            name: "classes".into(),
            texts: vec![String::new(); rows.len()],
            labels,
            n_classes: m,
            splits,
            spurious: None,
            bias: None,
        };
        let target = DirectFeatures {
            activations: Matrix::from_rows(&rows).unwrap(),
        };
        let r = tpp_eval(&target, &set, 1, &ProbeConfig::default()).unwrap();
        assert!(r.score > 0.3, "{r:?}");
        assert_eq!(r.score, -r.score_opposite_sign);
        assert_eq!(tpp_score(&r.a, &r.a_cross).unwrap(), r.score);
    }
}
