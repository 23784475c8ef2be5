//! Feature absorption on the first-letter task.
//!
//! For every letter a multinomial probe on `ff_out` at the word token gives
//! the ground-truth direction `p`. The two features with the largest
//! letter-vs-rest gap `s_j` are the main features. An input counts as
//! absorbed only when the main features fail on it, i.e. their summed
//! signed projection `Σ a_i d_i·p` is not positive while the probe still
//! classifies the word correctly; the auxiliary set is then the strongest
//! positive probe-aligned features outside the main set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::probing::{feature_scores, select_top_k};
use super::splice::Splice;
use crate::coders::FeatureCoder;
use crate::datasets::FirstLetterTask;
use crate::error::{Error, Result};
use crate::lm::{HookPoint, HookSite, Model};
use crate::numerics::{fit_linear_probe, Matrix, ProbeConfig};

/// One scored input.
#[derive(Clone, Debug)]
pub struct AbsorptionCase<'a> {
    pub s_main: Vec<usize>,
    pub s_abs: Vec<usize>,
    /// Activation of every feature.
    pub a: &'a [f32],
    /// Unit decoder direction of every feature, one per row.
    pub d: &'a Matrix,
    /// Ground-truth probe direction.
    pub p: &'a [f64],
}

const UNIT_TOL: f64 = 1e-4;

impl AbsorptionCase<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.a.len() != self.d.rows() || self.d.cols() != self.p.len() {
            return Err(Error::shape("activations, directions and probe disagree"));
        }
        for &i in self.s_main.iter().chain(&self.s_abs) {
            if i >= self.a.len() {
                return Err(Error::OutOfRange {
                    index: i,
                    len: self.a.len(),
                });
            }
            let n = self.d.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::invalid(format!("direction {i} has norm {n}")));
            }
        }
        if self.s_main.iter().any(|i| self.s_abs.contains(i)) {
            return Err(Error::invalid("main and absorbing sets overlap"));
        }
        Ok(())
    }

    /// `a_i d_i·p`.
    pub fn contribution(&self, i: usize) -> f64 {
        let proj: f64 = self.d.row(i).iter().zip(self.p).map(|(&d, &p)| d as f64 * p).sum();
        self.a[i] as f64 * proj
    }
}

/// `Σ_abs c_i / (Σ_abs c_i + Σ_main c_i)` over clipped contributions
/// `c_i = max(0, a_i d_i·p)`; 0 when both sums vanish.
pub fn absorption_score(case: &AbsorptionCase<'_>) -> Result<f64> {
    case.validate()?;
    let sum = |set: &[usize]| set.iter().map(|&i| case.contribution(i).max(0.0)).sum::<f64>();
    let abs = sum(&case.s_abs);
    let main = sum(&case.s_main);
    if abs + main <= 0.0 {
        return Ok(0.0);
    }
    Ok(abs / (abs + main))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbsorptionConfig {
    pub main_features: usize,
    pub max_absorbing: usize,
    /// Minimum cosine between an absorbing feature and the probe.
    pub cos_threshold: f64,
    pub probe: ProbeConfig,
}

impl Default for AbsorptionConfig {
    fn default() -> Self {
        Self {
            main_features: 2,
            max_absorbing: 10,
            cos_threshold: 0.025,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LetterAbsorption {
    pub letter: char,
    pub s_main: Vec<usize>,
    pub words_scored: usize,
    pub words_absorbed: usize,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbsorptionResult {
    pub mean: f64,
    pub per_letter: Vec<LetterAbsorption>,
    pub skipped: Vec<char>,
    pub probe_accuracy: f64,
}

fn word_position(model: &Model, word: &str) -> Option<usize> {
    let ids = model.tokenizer.encode(word);
    if ids.is_empty() || model.tokenizer.unk().is_some_and(|u| ids.contains(&u)) {
        return None;
    }
    Some(ids.len())
}

/// Mean absorption over correctly-probed words of every covered letter.
pub fn absorption_eval(
    model: &Model,
    coder: &FeatureCoder,
    task: &FirstLetterTask,
    cfg: &AbsorptionConfig,
) -> Result<AbsorptionResult> {
    if coder.d_out() != model.config.d_model {
        return Err(Error::shape("coder does not write into the residual width"));
    }
    Splice::new(model, coder)?;
    let in_hp = HookPoint::new(coder.layer(), coder.input_site());
    let out_hp = HookPoint::new(coder.layer(), HookSite::FfOut);

    let mut words: Vec<(usize, &str, usize)> = Vec::new();
    let mut skipped = Vec::new();
    for (li, (letter, ws)) in task.words.iter().enumerate() {
        let before = words.len();
        for w in ws {
            match word_position(model, w) {
                Some(pos) => words.push((li, w.as_str(), pos)),
                None => log::debug!("word {w:?} is not in the vocabulary"),
            }
        }
        if words.len() == before {
            log::warn!("letter {letter:?} has no in-vocabulary words; skipped");
            skipped.push(*letter);
        }
    }
    if words.is_empty() {
        return Err(Error::Empty("first-letter vocabulary"));
    }

    // activations and ff_out at the word's last token
    let rows: Vec<(Vec<f32>, Vec<f32>)> = words
        .par_iter()
        .map(|&(_, w, pos)| {
            let toks = model.encode_prompt(&FirstLetterTask::prompt(w));
            let x = model.forward_with_hooks(&toks, &[in_hp, out_hp], None)?;
            let a = coder.encode(&x.captures[&in_hp])?;
            Ok((a.row(pos).to_vec(), x.captures[&out_hp].row(pos).to_vec()))
        })
        .collect::<Result<_>>()?;
    let acts = Matrix::from_rows(&rows.iter().map(|r| r.0.clone()).collect::<Vec<_>>())?;
    let outs = Matrix::from_rows(&rows.iter().map(|r| r.1.clone()).collect::<Vec<_>>())?;
    let labels: Vec<usize> = words.iter().map(|w| w.0).collect();

    // compact the label space to the covered letters
    let mut covered: Vec<usize> = labels.clone();
    covered.dedup();
    let dense: Vec<usize> = labels
        .iter()
        .map(|l| covered.binary_search(l).expect("covered"))
        .collect();
    if covered.len() < 2 {
        return Err(Error::Degenerate("first-letter probe needs two letters".into()));
    }
    let probe = fit_linear_probe(&outs, &dense, &cfg.probe)?;
    let probe_accuracy = probe.accuracy(&outs, &dense);
    let raw: Vec<Vec<f64>> = (0..covered.len()).map(|c| probe.raw_direction(c)).collect();
    let dim = outs.cols();
    let center: Vec<f64> = (0..dim)
        .map(|j| raw.iter().map(|r| r[j]).sum::<f64>() / raw.len() as f64)
        .collect();

    let d = coder.unit_directions();
    let live: Vec<bool> = d.row_iter().map(|r| r.iter().any(|&v| v != 0.0)).collect();

    let per_letter: Vec<LetterAbsorption> = (0..covered.len())
        .into_par_iter()
        .map(|c| {
            let mut p: Vec<f64> = raw[c].iter().zip(&center).map(|(r, m)| r - m).collect();
            let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Degenerate("zero probe direction".into()));
            }
            p.iter_mut().for_each(|v| *v /= norm);

            let y: Vec<usize> = dense.iter().map(|&l| (l == c) as usize).collect();
            let mut scores = feature_scores(&acts, &y)?;
            for (s, &ok) in scores.iter_mut().zip(&live) {
                if !ok {
                    *s = f64::NEG_INFINITY;
                }
            }
            let s_main = select_top_k(&scores, cfg.main_features).features;
            let cos: Vec<f64> = d
                .row_iter()
                .map(|r| r.iter().zip(&p).map(|(&v, &q)| v as f64 * q).sum())
                .collect();

            let mut total = 0.0;
            let mut scored = 0;
            let mut absorbed = 0;
            for (i, &l) in dense.iter().enumerate() {
                if l != c || probe.predict(outs.row(i)) != c {
                    continue;
                }
                scored += 1;
                let a = acts.row(i);
                let mut case = AbsorptionCase {
                    s_main: s_main.clone(),
                    s_abs: Vec::new(),
                    a,
                    d: &d,
                    p: &p,
                };
                let main_signed: f64 = s_main.iter().map(|&j| case.contribution(j)).sum();
                if main_signed > 0.0 {
                    continue;
                }
                let mut cands: Vec<(usize, f64)> = (0..a.len())
                    .filter(|j| live[*j] && !s_main.contains(j) && cos[*j] >= cfg.cos_threshold)
                    .map(|j| (j, case.contribution(j)))
                    .filter(|&(_, v)| v > 0.0)
                    .collect();
                cands.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
                cands.truncate(cfg.max_absorbing);
                case.s_abs = cands.into_iter().map(|(j, _)| j).collect();
                let s = absorption_score(&case)?;
                if s > 0.0 {
                    absorbed += 1;
                }
                total += s;
            }
            Ok(LetterAbsorption {
                letter: task.words[covered[c]].0,
                s_main,
                words_scored: scored,
                words_absorbed: absorbed,
                mean: if scored == 0 { 0.0 } else { total / scored as f64 },
            })
        })
        .collect::<Result<_>>()?;

    let scored: Vec<&LetterAbsorption> = per_letter.iter().filter(|l| l.words_scored > 0).collect();
    let mean = if scored.is_empty() {
        0.0
    } else {
        scored.iter().map(|l| l.mean).sum::<f64>() / scored.len() as f64
    };
    Ok(AbsorptionResult {
        mean,
        per_letter,
        skipped,
        probe_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn basis(n: usize) -> Matrix {
        Matrix::identity(n)
    }

    #[test]
    fn hand_case_quarter() {
        let d = basis(3);
        let p = [1.0, 1.0, 0.0];
        let a = [3.0, 1.0, 0.0];
        // main {0}: 3·1 = 3; abs {1}: 1·1 = 1 → 1/4
        let case = AbsorptionCase {
            s_main: vec![0],
            s_abs: vec![1],
            a: &a,
            d: &d,
            p: &p,
        };
        assert!((absorption_score(&case).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn fixed_points() {
        let d = basis(2);
        let p = [1.0, 1.0];
        let none = AbsorptionCase {
            s_main: vec![0],
            s_abs: vec![1],
            a: &[2.0, 0.0],
            d: &d,
            p: &p,
        };
        assert_eq!(absorption_score(&none).unwrap(), 0.0);
        let empty = AbsorptionCase {
            s_main: vec![0],
            s_abs: vec![],
            a: &[2.0, 5.0],
            d: &d,
            p: &p,
        };
        assert_eq!(absorption_score(&empty).unwrap(), 0.0);
        let full = AbsorptionCase {
            s_main: vec![0],
            s_abs: vec![1],
            a: &[0.0, 2.0],
            d: &d,
            p: &p,
        };
        assert_eq!(absorption_score(&full).unwrap(), 1.0);
    }

    #[test]
    fn invariants_are_enforced() {
        let d = Matrix::from_rows(&[[2.0, 0.0], [0.0, 1.0]]).unwrap();
        let bad_norm = AbsorptionCase {
            s_main: vec![0],
            s_abs: vec![1],
            a: &[1.0, 1.0],
            d: &d,
            p: &[1.0, 0.0],
        };
        assert!(absorption_score(&bad_norm).is_err());
        let b = basis(2);
        let overlap = AbsorptionCase {
            s_main: vec![0],
            s_abs: vec![0],
            a: &[1.0, 1.0],
            d: &b,
            p: &[1.0, 0.0],
        };
        assert!(absorption_score(&overlap).is_err());
    }

    proptest! {
        #[test]
        fn matches_scalar_oracle(
            a in prop::collection::vec(-3.0f32..3.0, 6),
            p in prop::collection::vec(-1.0f64..1.0, 6),
            split in 1usize..5,
        ) {
            let d = basis(6);
            let case = AbsorptionCase {
                s_main: (0..split).collect(),
                s_abs: (split..6).collect(),
                a: &a,
                d: &d,
                p: &p,
            };
            let got = absorption_score(&case).unwrap();
            let mut main = 0.0f64;
            let mut abs = 0.0f64;
            for i in 0..6 {
                let c = (a[i] as f64 * p[i]).max(0.0);
                if i < split { main += c } else { abs += c }
            }
            let want = if main + abs == 0.0 { 0.0 } else { abs / (main + abs) };
            prop_assert!((got - want).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&got));
        }
    }
}
