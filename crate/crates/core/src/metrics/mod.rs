//! The evaluation suite: coder status (alive rate, explained variance),
//! concept detection (absorption, sparse probing), explanation (auto-interp)
//! and disentanglement (RAVEL-lite, SCR, TPP).

mod absorption;
pub mod autointerp;
mod probing;
mod ravel;
mod scr;
mod splice;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::coders::{FeatureCoder, FeatureCoderHandle};
use crate::error::{Error, Result};
use crate::harvest::{capture_sites, ActivationHistory};
use crate::lm::{HookPoint, Model};
use crate::numerics::{mean_and_2sem, Matrix};

pub use absorption::{
    absorption_eval, absorption_score, AbsorptionCase, AbsorptionConfig, AbsorptionResult,
    LetterAbsorption,
};
pub use autointerp::{
    autointerp_eval, build_scoring_sets, AutoInterpConfig, AutoInterpResult, ExplainerClient,
    ScoringSet,
};
pub use probing::{
    feature_scores, pooled_features, select_top_k, sparse_probing_eval, ConceptData,
    FeatureSelection, ProbingOutcome, SparseProbingResult,
};
pub use ravel::{
    ravel_eval, RavelConfig, RavelIntervention, RavelLogEntry, RavelResult,
};
pub use scr::{
    scr_eval, scr_eval_grid, scr_score, tpp_eval, tpp_score, AblationTarget, DirectFeatures,
    ScrResult, SplicedTexts, TppResult, SCR_K_GRID,
};
pub use splice::{Splice, SpliceMode};

/// Column keys of a [`MetricReport`], in table order.
pub const METRIC_KEYS: [&str; 8] = [
    "feature_alive",
    "explained_variance",
    "absorption",
    "sparse_probing",
    "autointerp",
    "ravel_isolation",
    "ravel_causality",
    "scr",
];

/// One metric cell: headline value, ±2 SEM over sub-runs, and the sub-runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: Option<f64>,
    pub dispersion: Option<f64>,
    pub sub_runs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl MetricValue {
    /// Mean and ±2 SEM of the sub-runs; `None` when there are none.
    pub fn from_sub_runs(sub_runs: Vec<f64>) -> Self {
        if sub_runs.is_empty() {
            return Self::undefined("no sub-runs");
        }
        let (m, d) = mean_and_2sem(&sub_runs);
        Self {
            value: Some(m),
            dispersion: Some(d),
            sub_runs,
            note: None,
        }
    }

    pub fn exact(v: f64) -> Self {
        Self::from_sub_runs(vec![v])
    }

    pub fn undefined(reason: impl Into<String>) -> Self {
        Self {
            value: None,
            dispersion: None,
            sub_runs: Vec::new(),
            note: Some(reason.into()),
        }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }
}

/// Every metric of one coder plus the configuration that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub coder: FeatureCoderHandle,
    pub metrics: BTreeMap<String, MetricValue>,
    /// Secondary series such as the SCR K grid or per-K probing accuracy.
    #[serde(default)]
    pub extras: BTreeMap<String, serde_json::Value>,
    pub config: serde_json::Value,
}

impl MetricReport {
    pub fn new(label: impl Into<String>, coder: FeatureCoderHandle, config: serde_json::Value) -> Self {
        Self {
            label: label.into(),
            coder,
            metrics: BTreeMap::new(),
            extras: BTreeMap::new(),
            config,
        }
    }

    pub fn insert(&mut self, key: &str, value: MetricValue) {
        self.metrics.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).and_then(|m| m.value)
    }
}

/// Fraction of features whose column maximum is positive.
pub fn feature_alive_rate(history: &ActivationHistory) -> Result<f64> {
    if history.rows() == 0 || history.d_coder() == 0 {
        return Err(Error::Empty("activation history"));
    }
    let a = &history.activations;
    let mut alive = vec![false; a.cols()];
    for row in a.row_iter() {
        for (f, &v) in alive.iter_mut().zip(row) {
            *f |= v > 0.0;
        }
    }
    Ok(alive.iter().filter(|&&f| f).count() as f64 / a.cols() as f64)
}

/// Alive rate from precomputed column maxima.
pub fn alive_rate_from_maxima(maxima: &[f32]) -> Result<f64> {
    if maxima.is_empty() {
        return Err(Error::Empty("column maxima"));
    }
    Ok(maxima.iter().filter(|&&m| m > 0.0).count() as f64 / maxima.len() as f64)
}

/// `1 − Σ‖x − x̂‖² / Σ‖x − x̄‖²` with `x̄` the token-mean target.
pub fn explained_variance(targets: &Matrix, recon: &Matrix) -> Result<f64> {
    if targets.shape() != recon.shape() {
        return Err(Error::shape(format!(
            "targets {:?} vs reconstructions {:?}",
            targets.shape(),
            recon.shape()
        )));
    }
    if targets.rows() == 0 {
        return Err(Error::Empty("targets"));
    }
    let mean = targets.column_means();
    let mut resid = 0.0f64;
    let mut total = 0.0f64;
    for (x, y) in targets.row_iter().zip(recon.row_iter()) {
        for ((&xv, &yv), &m) in x.iter().zip(y).zip(&mean) {
            resid += (xv as f64 - yv as f64).powi(2);
            total += (xv as f64 - m).powi(2);
        }
    }
    if !resid.is_finite() || !total.is_finite() {
        return Err(Error::NonFinite("explained variance"));
    }
    if total <= f64::EPSILON * targets.data().len() as f64 {
        return Err(Error::Degenerate("targets are constant".into()));
    }
    Ok(1.0 - resid / total)
}

/// Explained variance of `coder` on the first `limit` tokens of `docs`,
/// against its own reconstruction target.
pub fn coder_explained_variance(
    model: &Model,
    coder: &FeatureCoder,
    docs: &[Vec<u32>],
    limit: usize,
) -> Result<f64> {
    let layer = coder.layer();
    let input = HookPoint::new(layer, coder.input_site());
    let target = HookPoint::new(layer, coder.target_site());
    let mut caps = capture_sites(model, &[input, target], docs, limit)?;
    let y = caps.pop().expect("two hooks");
    let x = caps.pop().expect("two hooks");
    let recon = coder.forward(&x)?;
    explained_variance(&y, &recon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harvest::tests::history_from;

    #[test]
    fn alive_rate_hand_counts() {
        let h = history_from(&[&[0.0, 2.0], &[0.0, 0.0], &[1.0, 0.0]], &[0, 0, 1]);
        assert_eq!(feature_alive_rate(&h).unwrap(), 1.0);
        let h = history_from(&[&[0.0, 2.0], &[0.0, 0.0], &[0.0, 3.0]], &[0, 0, 1]);
        assert_eq!(feature_alive_rate(&h).unwrap(), 0.5);
        let h = history_from(&[&[0.0, 0.0], &[0.0, -1.0]], &[0, 0]);
        assert_eq!(feature_alive_rate(&h).unwrap(), 0.0);
        assert_eq!(alive_rate_from_maxima(&[0.0, 2.0]).unwrap(), 0.5);
    }

    #[test]
    fn explained_variance_hand_case() {
        // targets (1,2),(3,6); mean (2,4); total = 1+4+1+4 = 10
        // recon (1,3),(2,6); resid = 0+1+1+0 = 2
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 6.0]]).unwrap();
        let y = Matrix::from_rows(&[[1.0, 3.0], [2.0, 6.0]]).unwrap();
        assert!((explained_variance(&x, &y).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(explained_variance(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn mean_predictor_scores_zero() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 6.0], [5.0, 1.0]]).unwrap();
        let m: Vec<f32> = x.column_means().iter().map(|&v| v as f32).collect();
        let y = Matrix::from_rows(&[m.clone(), m.clone(), m]).unwrap();
        assert!(explained_variance(&x, &y).unwrap().abs() < 1e-7);
    }

    #[test]
    fn constant_targets_are_degenerate() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0]]).unwrap();
        assert!(matches!(explained_variance(&x, &x), Err(Error::Degenerate(_))));
    }

    #[test]
    fn metric_value_keeps_sub_runs() {
        let v = MetricValue::from_sub_runs(vec![1.0, 2.0, 3.0]);
        assert_eq!(v.value, Some(2.0));
        let (_, d) = mean_and_2sem(&v.sub_runs);
        assert_eq!(v.dispersion, Some(d));
        assert!(MetricValue::from_sub_runs(vec![]).value.is_none());
    }
}
