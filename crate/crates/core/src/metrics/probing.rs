//! Sparse probing: a logistic probe restricted to the K features whose
//! class-conditional means differ most.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::splice::{mean_rows_after_bos, Splice};
use crate::datasets::{LabeledTextSet, Split};
use crate::error::{Error, Result};
use crate::numerics::{fit_linear_probe, Matrix, ProbeConfig};

/// `s_j = |E₊[h_j] − E₋[h_j]|` for binary labels.
pub fn feature_scores(x: &Matrix, y: &[usize]) -> Result<Vec<f64>> {
    if x.rows() != y.len() {
        return Err(Error::shape(format!("{} rows for {} labels", x.rows(), y.len())));
    }
    let mut sum = [vec![0.0f64; x.cols()], vec![0.0f64; x.cols()]];
    let mut count = [0usize; 2];
    for (row, &c) in x.row_iter().zip(y) {
        if c > 1 {
            return Err(Error::invalid(format!("label {c} is not binary")));
        }
        count[c] += 1;
        for (s, &v) in sum[c].iter_mut().zip(row) {
            *s += v as f64;
        }
    }
    if count[0] == 0 || count[1] == 0 {
        return Err(Error::invalid("feature scores need both classes"));
    }
    Ok(sum[1]
        .iter()
        .zip(&sum[0])
        .map(|(p, n)| (p / count[1] as f64 - n / count[0] as f64).abs())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSelection {
    pub features: Vec<usize>,
    /// Every score was zero, so the lowest indices were taken.
    pub degenerate: bool,
}

/// The `k` highest scores, ties broken toward the lower index.
pub fn select_top_k(scores: &[f64], k: usize) -> FeatureSelection {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    FeatureSelection {
        features: order,
        degenerate: scores.iter().all(|&s| s == 0.0),
    }
}

/// One binary concept as pooled feature activations.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptData {
    pub name: String,
    pub train_x: Matrix,
    pub train_y: Vec<usize>,
    pub eval_x: Matrix,
    pub eval_y: Vec<usize>,
}

impl ConceptData {
    /// Split `features` (one row per text of `set`) by the set's splits.
    pub fn from_set(set: &LabeledTextSet, features: &Matrix) -> Result<Self> {
        if features.rows() != set.len() {
            return Err(Error::shape(format!(
                "{} feature rows for {} texts",
                features.rows(),
                set.len()
            )));
        }
        let tr = set.indices(Split::Train);
        let ev = set.indices(Split::Eval);
        Ok(Self {
            name: set.name.clone(),
            train_x: features.select_rows(&tr),
            train_y: tr.iter().map(|&i| set.labels[i]).collect(),
            eval_x: features.select_rows(&ev),
            eval_y: ev.iter().map(|&i| set.labels[i]).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbingOutcome {
    pub concept: String,
    pub selection: FeatureSelection,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseProbingResult {
    pub k: usize,
    pub accuracy: f64,
    pub per_concept: Vec<ProbingOutcome>,
}

fn probe_concept(c: &ConceptData, k: usize, probe: &ProbeConfig) -> Result<ProbingOutcome> {
    for (y, what) in [(&c.train_y, "train"), (&c.eval_y, "eval")] {
        if !(y.contains(&0) && y.contains(&1)) {
            return Err(Error::invalid(format!(
                "concept {} has one class in its {what} split",
                c.name
            )));
        }
    }
    let scores = feature_scores(&c.train_x, &c.train_y)?;
    let selection = select_top_k(&scores, k);
    if selection.degenerate {
        log::warn!(
            "concept {}: all feature scores are zero, probing the lowest {k} indices",
            c.name
        );
    }
    let model = fit_linear_probe(&c.train_x.select_cols(&selection.features), &c.train_y, probe)?;
    let accuracy = model.accuracy(&c.eval_x.select_cols(&selection.features), &c.eval_y);
    Ok(ProbingOutcome {
        concept: c.name.clone(),
        selection,
        accuracy,
    })
}

/// Held-out accuracy of top-`k` probes, averaged over concepts.
pub fn sparse_probing_eval(
    concepts: &[ConceptData],
    k: usize,
    probe: &ProbeConfig,
) -> Result<SparseProbingResult> {
    if concepts.is_empty() {
        return Err(Error::Empty("concept datasets"));
    }
    if k == 0 {
        return Err(Error::invalid("K must be positive"));
    }
    let per_concept: Vec<ProbingOutcome> = concepts
        .par_iter()
        .map(|c| probe_concept(c, k, probe))
        .collect::<Result<_>>()?;
    let accuracy = per_concept.iter().map(|o| o.accuracy).sum::<f64>() / per_concept.len() as f64;
    Ok(SparseProbingResult {
        k,
        accuracy,
        per_concept,
    })
}

/// Mean coder activation over the non-BOS tokens of each text.
pub fn pooled_features(splice: &Splice<'_>, texts: &[String]) -> Result<Matrix> {
    let rows: Vec<Vec<f32>> = texts
        .par_iter()
        .map(|t| {
            let toks = splice.model.encode_prompt(t);
            Ok(mean_rows_after_bos(&splice.features(&toks)?))
        })
        .collect::<Result<_>>()?;
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, splice.coder.d_coder()));
    }
    Matrix::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    /// Feature `j` fires exactly when concept `j` is present; the rest is noise.
    fn planted(concept: usize, n: usize, width: usize, seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = RngStream::new(seed, 1);
        let mut x = Matrix::zeros(n, width);
        let mut y = Vec::new();
        for r in 0..n {
            let c = r % 2;
            y.push(c);
            for j in 0..width {
                let noise = rng.uniform() as f32 * 0.3;
                x.set(r, j, if j == concept { c as f32 } else { noise });
            }
        }
        (x, y)
    }

    fn concept(idx: usize, seed: u64) -> ConceptData {
        let (tx, ty) = planted(idx, 80, 12, seed);
        let (ex, ey) = planted(idx, 40, 12, seed + 100);
        ConceptData {
            name: format!("c{idx}"),
            train_x: tx,
            train_y: ty,
            eval_x: ex,
            eval_y: ey,
        }
    }

    #[test]
    fn planted_one_hot_concepts_probe_perfectly_at_k1() {
        let cs: Vec<ConceptData> = (0..4).map(|i| concept(i, i as u64)).collect();
        let r = sparse_probing_eval(&cs, 1, &ProbeConfig::default()).unwrap();
        assert!(r.accuracy >= 0.99, "{}", r.accuracy);
        for (i, o) in r.per_concept.iter().enumerate() {
            assert_eq!(o.selection.features, vec![i]);
        }
    }

    #[test]
    fn scores_match_hand_means() {
        let x = Matrix::from_rows(&[[1.0, 4.0], [3.0, 0.0], [0.0, 1.0]]).unwrap();
        // class 1 = rows 0,1 (means 2, 2); class 0 = row 2 (0, 1)
        let s = feature_scores(&x, &[1, 1, 0]).unwrap();
        assert_eq!(s, vec![2.0, 1.0]);
    }

    #[test]
    fn zero_signal_falls_back_to_lowest_indices() {
        let x = Matrix::from_rows(&[[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]).unwrap();
        let s = feature_scores(&x, &[0, 1]).unwrap();
        let sel = select_top_k(&s, 2);
        assert!(sel.degenerate);
        assert_eq!(sel.features, vec![0, 1]);
    }

    #[test]
    fn null_labels_sit_near_chance() {
        let mut accs = Vec::new();
        for seed in 0..20u64 {
            let mut rng = RngStream::new(seed, 9);
            let mut mk = |n: usize| {
                let x = rng.normal_matrix(n, 8, 1.0);
                let y: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
                (x, y)
            };
            let (tx, ty) = mk(60);
            let (ex, ey) = mk(60);
            let c = ConceptData {
                name: "null".into(),
                train_x: tx,
                train_y: ty,
                eval_x: ex,
                eval_y: ey,
            };
            accs.push(sparse_probing_eval(&[c], 1, &ProbeConfig::default()).unwrap().accuracy);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.5).abs() <= 0.15, "{mean}");
    }

    #[test]
    fn single_class_concept_is_rejected() {
        let mut c = concept(0, 1);
        c.train_y.iter_mut().for_each(|y| *y = 1);
        assert!(sparse_probing_eval(&[c], 1, &ProbeConfig::default()).is_err());
    }
}
