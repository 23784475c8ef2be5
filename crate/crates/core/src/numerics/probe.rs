use serde::{Deserialize, Serialize};

use super::{Matrix, RngStream};
use crate::error::{Error, Result};

/// Training recipe for [`fit_linear_probe`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 300,
            l2: 1e-3,
            seed: 0,
        }
    }
}

/// Multinomial logistic-regression probe.
///
/// Inputs are standardized with the training mean and scale before the
/// linear map; `weights` live in the standardized space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub weights: Vec<Vec<f32>>,
    pub bias: Vec<f32>,
    pub mean: Vec<f32>,
    pub scale: Vec<f32>,
}

impl ProbeModel {
    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn logits(&self, x: &[f32]) -> Vec<f64> {
        let z: Vec<f64> = x
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((&v, &m), &s)| (v as f64 - m as f64) / s as f64)
            .collect();
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, &b)| {
                b as f64
                    + w.iter()
                        .zip(&z)
                        .map(|(&wi, &zi)| wi as f64 * zi)
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn predict(&self, x: &[f32]) -> usize {
        argmax(&self.logits(x))
    }

    pub fn accuracy(&self, x: &Matrix, y: &[usize]) -> f64 {
        if y.is_empty() {
            return 0.0;
        }
        let correct = x
            .row_iter()
            .zip(y)
            .filter(|(row, &label)| self.predict(row) == label)
            .count();
        correct as f64 / y.len() as f64
    }

    /// Weight vector of `class` mapped back to raw input units.
    pub fn raw_direction(&self, class: usize) -> Vec<f64> {
        self.weights[class]
            .iter()
            .zip(&self.scale)
            .map(|(&w, &s)| w as f64 / s as f64)
            .collect()
    }

    /// For a two-class probe, the raw-space direction favouring class 1.
    pub fn binary_direction(&self) -> Vec<f64> {
        let w1 = self.raw_direction(1);
        let w0 = self.raw_direction(0);
        w1.iter().zip(&w0).map(|(a, b)| a - b).collect()
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fits a multinomial logistic probe by full-batch gradient descent on the
/// L2-regularized cross-entropy.
pub fn fit_linear_probe(x: &Matrix, y: &[usize], config: &ProbeConfig) -> Result<ProbeModel> {
    if x.rows() != y.len() {
        return Err(Error::shape(format!(
            "{} feature rows for {} labels",
            x.rows(),
            y.len()
        )));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("probe inputs"));
    }
    let m = y.iter().copied().max().map_or(0, |c| c + 1);
    let mut present = vec![false; m];
    for &c in y {
        present[c] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::invalid("probe needs at least two classes present"));
    }
    let (n, d) = x.shape();

    let mean: Vec<f64> = x.column_means();
    let mut var = vec![0.0f64; d];
    for row in x.row_iter() {
        for ((v, &r), &mu) in var.iter_mut().zip(row).zip(&mean) {
            let c = r as f64 - mu;
            *v += c * c;
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|v| {
            let s = (v / n as f64).sqrt();
            if s > 1e-8 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let z: Vec<f64> = x
        .row_iter()
        .flat_map(|row| {
            row.iter()
                .zip(&mean)
                .zip(&scale)
                .map(|((&v, &mu), &s)| (v as f64 - mu) / s)
                .collect::<Vec<_>>()
        })
        .collect();

    let mut rng = RngStream::new(config.seed, 0x9b0b);
    let mut w: Vec<f64> = (0..m * d).map(|_| rng.normal() * 1e-3).collect();
    let mut b = vec![0.0f64; m];
    let mut gw = vec![0.0f64; m * d];
    let mut gb = vec![0.0f64; m];
    let mut p = vec![0.0f64; m];
    let inv_n = 1.0 / n as f64;

    for _ in 0..config.epochs {
        gw.iter_mut().for_each(|g| *g = 0.0);
        gb.iter_mut().for_each(|g| *g = 0.0);
        for (i, &label) in y.iter().enumerate() {
            let zi = &z[i * d..(i + 1) * d];
            for c in 0..m {
                let wc = &w[c * d..(c + 1) * d];
                p[c] = b[c] + wc.iter().zip(zi).map(|(a, b)| a * b).sum::<f64>();
            }
            let mx = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in p.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for c in 0..m {
                let err = p[c] / sum - if c == label { 1.0 } else { 0.0 };
                gb[c] += err;
                let g = &mut gw[c * d..(c + 1) * d];
                for (gj, &zj) in g.iter_mut().zip(zi) {
                    *gj += err * zj;
                }
            }
        }
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= config.learning_rate * (gi * inv_n + config.l2 * *wi);
        }
        for (bi, gi) in b.iter_mut().zip(&gb) {
            *bi -= config.learning_rate * gi * inv_n;
        }
    }

    if w.iter().chain(&b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("probe weights"));
    }
    Ok(ProbeModel {
        weights: w.chunks(d.max(1)).take(m).map(|c| c.iter().map(|&v| v as f32).collect()).collect(),
        bias: b.iter().map(|&v| v as f32).collect(),
        mean: mean.iter().map(|&v| v as f32).collect(),
        scale: scale.iter().map(|&v| v as f32).collect(),
    })
}
