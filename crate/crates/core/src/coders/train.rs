use serde::{Deserialize, Serialize};

use super::{CoderKind, FeatureCoder, SparseActivation, SparseCoderWeights};
use crate::error::{Error, Result};
use crate::harvest::capture_sites;
use crate::lm::{HookPoint, HookSite, Model};
use crate::numerics::{adam_step, AdamHyper, AdamState, Matrix, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparseActivationKind {
    Relu,
    JumpRelu,
    TopK,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseCoderHyper {
    pub width: usize,
    pub activation: SparseActivationKind,
    /// Only used by the top-k activation.
    pub topk_k: usize,
    /// L1 coefficient, in units where the mean squared target norm is d_out.
    pub l1: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub resample_dead: bool,
    /// Straight-through kernel width for JumpReLU thresholds.
    pub jump_bandwidth: f64,
}

impl Default for SparseCoderHyper {
    fn default() -> Self {
        Self {
            width: 512,
            activation: SparseActivationKind::Relu,
            topk_k: 32,
            l1: 0.05,
            epochs: 12,
            batch_size: 256,
            learning_rate: 2e-3,
            seed: 0,
            resample_dead: true,
            jump_bandwidth: 0.001,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Mean per-token objective for each epoch, in normalized units.
    pub epoch_losses: Vec<f64>,
    /// Mean number of active latents per token after training.
    pub final_l0: f64,
    /// Explained variance on the training data after training.
    pub final_explained_variance: f64,
    pub resampled: usize,
}

const JUMP_INIT: f32 = 0.001;

/// Harvest a layer's sublayer input and output from `docs` and train a
/// sparse coder on them.
pub fn train_sparse_coder(
    kind: CoderKind,
    model: &Model,
    layer: usize,
    docs: &[Vec<u32>],
    token_limit: usize,
    hyper: &SparseCoderHyper,
) -> Result<(FeatureCoder, TrainingLog)> {
    let sites = [
        HookPoint::new(layer, HookSite::FfIn),
        HookPoint::new(layer, HookSite::FfOut),
    ];
    let mut captured = capture_sites(model, &sites, docs, token_limit)?;
    let targets = captured.pop().expect("two sites requested");
    let inputs = captured.pop().expect("two sites requested");
    let inputs = if kind == CoderKind::Sae { targets.clone() } else { inputs };
    let (weights, log) = train_sparse_coder_on(kind, &inputs, &targets, hyper)?;
    Ok((FeatureCoder::from_sparse(kind, layer, weights)?, log))
}

fn mean_sq_norm(m: &Matrix) -> f64 {
    m.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / m.rows() as f64
}

struct Work {
    w_enc: Matrix,
    b_enc: Vec<f32>,
    w_dec: Matrix,
    b_dec: Vec<f32>,
    theta: Vec<f32>,
}

impl Work {
    fn snapshot(&self, activation: SparseActivationKind, k: usize) -> SparseCoderWeights {
        SparseCoderWeights {
            w_enc: self.w_enc.clone(),
            b_enc: self.b_enc.clone(),
            w_dec: self.w_dec.clone(),
            b_dec: self.b_dec.clone(),
            activation: match activation {
                SparseActivationKind::Relu => SparseActivation::Relu,
                SparseActivationKind::JumpRelu => SparseActivation::JumpRelu {
                    theta: self.theta.clone(),
                },
                SparseActivationKind::TopK => SparseActivation::TopK { k },
            },
        }
    }
}

fn normalize_rows(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let n = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v = (*v as f64 / n) as f32);
        }
    }
}

/// Train on explicit (input, target) rows. For an SAE pass the same matrix
/// twice.
pub fn train_sparse_coder_on(
    kind: CoderKind,
    inputs: &Matrix,
    targets: &Matrix,
    hyper: &SparseCoderHyper,
) -> Result<(SparseCoderWeights, TrainingLog)> {
    if kind.is_ffkv() {
        return Err(Error::invalid(format!("{kind} coders are not trained")));
    }
    if hyper.width < 1 {
        return Err(Error::invalid("sparse coder width must be at least 1"));
    }
    if inputs.rows() == 0 {
        return Err(Error::Empty("training activations"));
    }
    if inputs.rows() != targets.rows() {
        return Err(Error::shape("inputs and targets have different row counts"));
    }
    if hyper.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if hyper.activation == SparseActivationKind::TopK
        && (hyper.topk_k == 0 || hyper.topk_k > hyper.width)
    {
        return Err(Error::invalid(format!("top-k {} outside 1..={}", hyper.topk_k, hyper.width)));
    }
    if !inputs.is_finite() || !targets.is_finite() {
        return Err(Error::NonFinite("training activations"));
    }
    let (n, d_in) = inputs.shape();
    let d_out = targets.cols();
    let c = hyper.width;

    // Work in units where the mean squared norm equals the dimension, then
    // fold the scales back into the weights at the end.
    let c_in = (d_in as f64 / mean_sq_norm(inputs).max(1e-30)).sqrt();
    let c_out = (d_out as f64 / mean_sq_norm(targets).max(1e-30)).sqrt();
    let mut x = inputs.clone();
    x.scale(c_in as f32);
    let mut y = targets.clone();
    y.scale(c_out as f32);

    let mut rng = RngStream::new(hyper.seed, 0x5ae0 + kind as u64);
    let mut w_dec = rng.normal_matrix(c, d_out, 1.0);
    normalize_rows(&mut w_dec);
    let w_enc = if kind == CoderKind::Sae && d_in == d_out {
        let mut w = w_dec.transpose();
        w.scale(0.5);
        w
    } else {
        rng.normal_matrix(d_in, c, 1.0 / (d_in as f64).sqrt())
    };
    let b_dec: Vec<f32> = y.column_means().iter().map(|&m| m as f32).collect();
    let mut work = Work {
        w_enc,
        b_enc: vec![0.0; c],
        w_dec,
        b_dec,
        theta: vec![JUMP_INIT; c],
    };
    let mut states = [
        AdamState::new(d_in * c),
        AdamState::new(c),
        AdamState::new(c * d_out),
        AdamState::new(d_out),
        AdamState::new(c),
    ];
    let adam = AdamHyper {
        lr: hyper.learning_rate,
        ..AdamHyper::default()
    };
    let l1 = if hyper.activation == SparseActivationKind::TopK { 0.0 } else { hyper.l1 };
    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..hyper.epochs {
        rng.shuffle(&mut order);
        let mut fired = vec![false; c];
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let xb = x.select_rows(batch);
            let yb = y.select_rows(batch);
            let b = batch.len() as f64;
            let weights = work.snapshot(hyper.activation, hyper.topk_k);
            let z = weights.preactivations(&xb)?;
            let a = weights.activate(&z);
            let mut yhat = a.matmul(&work.w_dec)?;
            yhat.add_row_vector(&work.b_dec);

            let mut g_y = yhat;
            let mut loss = 0.0;
            for (g, &t) in g_y.data_mut().iter_mut().zip(yb.data()) {
                let r = *g as f64 - t as f64;
                loss += r * r;
                *g = (2.0 * r / b) as f32;
            }
            loss += l1 * a.data().iter().map(|v| v.abs() as f64).sum::<f64>();
            epoch_loss += loss;
            for r in 0..a.rows() {
                for (f, &v) in fired.iter_mut().zip(a.row(r)) {
                    *f |= v != 0.0;
                }
            }

            let g_wdec = a.matmul_at(&g_y)?;
            let g_bdec: Vec<f32> = g_y.column_sums().iter().map(|&v| v as f32).collect();
            let mut g_a = g_y.matmul_bt(&work.w_dec)?;
            let mut g_theta = vec![0.0f64; c];
            let eps = hyper.jump_bandwidth;
            for r in 0..g_a.rows() {
                let zr = z.row(r);
                let ar = a.row(r);
                for (j, g) in g_a.row_mut(r).iter_mut().enumerate() {
                    let mut gj = *g as f64;
                    if ar[j] > 0.0 {
                        gj += l1 / b;
                    }
                    if hyper.activation == SparseActivationKind::JumpRelu {
                        let th = work.theta[j] as f64;
                        if ((zr[j] as f64 - th) / eps).abs() < 0.5 {
                            let up = *g as f64 + l1 / b;
                            g_theta[j] += up * (-th / eps);
                        }
                    }
                    *g = if ar[j] != 0.0 { gj as f32 } else { 0.0 };
                }
            }
            let g_z = g_a;
            let g_wenc = xb.matmul_at(&g_z)?;
            let g_benc: Vec<f32> = g_z.column_sums().iter().map(|&v| v as f32).collect();
            let g_theta: Vec<f32> = g_theta.iter().map(|&v| v as f32).collect();

            adam_step(work.w_enc.data_mut(), g_wenc.data(), &mut states[0], &adam)?;
            adam_step(&mut work.b_enc, &g_benc, &mut states[1], &adam)?;
            adam_step(work.w_dec.data_mut(), g_wdec.data(), &mut states[2], &adam)?;
            adam_step(&mut work.b_dec, &g_bdec, &mut states[3], &adam)?;
            if hyper.activation == SparseActivationKind::JumpRelu {
                adam_step(&mut work.theta, &g_theta, &mut states[4], &adam)?;
                work.theta.iter_mut().for_each(|t| *t = t.max(0.0));
            }
            normalize_rows(&mut work.w_dec);
        }
        log.epoch_losses.push(epoch_loss / n as f64);

        let dead: Vec<usize> = (0..c).filter(|&j| !fired[j]).collect();
        if hyper.resample_dead && !dead.is_empty() && epoch + 1 < hyper.epochs {
            log.resampled += dead.len();
            resample(&mut work, &mut states, &dead, &x, &y, hyper, &mut rng)?;
        }
    }

    let mut weights = work.snapshot(hyper.activation, hyper.topk_k);
    let (l0, ev) = fit_stats(&weights, &x, &y)?;
    log.final_l0 = l0;
    log.final_explained_variance = ev;

    let enc_scale = (c_in / c_out) as f32;
    weights.w_enc.scale(enc_scale);
    let inv_out = (1.0 / c_out) as f32;
    weights.b_enc.iter_mut().for_each(|v| *v *= inv_out);
    weights.b_dec.iter_mut().for_each(|v| *v *= inv_out);
    if let SparseActivation::JumpRelu { theta } = &mut weights.activation {
        theta.iter_mut().for_each(|v| *v *= inv_out);
    }
    Ok((weights, log))
}

fn fit_stats(w: &SparseCoderWeights, x: &Matrix, y: &Matrix) -> Result<(f64, f64)> {
    let a = w.activate(&w.preactivations(x)?);
    let l0 = a.data().iter().filter(|v| **v != 0.0).count() as f64 / x.rows() as f64;
    let mut yhat = a.matmul(&w.w_dec)?;
    yhat.add_row_vector(&w.b_dec);
    let mean = y.column_means();
    let mut resid = 0.0;
    let mut total = 0.0;
    for r in 0..y.rows() {
        for (j, (&t, &p)) in y.row(r).iter().zip(yhat.row(r)).enumerate() {
            resid += (t as f64 - p as f64).powi(2);
            total += (t as f64 - mean[j]).powi(2);
        }
    }
    let ev = if total > 0.0 { 1.0 - resid / total } else { 0.0 };
    Ok((l0, ev))
}

/// Point dead latents at inputs the current coder reconstructs worst.
fn resample(
    work: &mut Work,
    states: &mut [AdamState; 5],
    dead: &[usize],
    x: &Matrix,
    y: &Matrix,
    hyper: &SparseCoderHyper,
    rng: &mut RngStream,
) -> Result<()> {
    let n = x.rows();
    let probe: Vec<usize> = if n > 4096 { rng.sample_indices(n, 4096) } else { (0..n).collect() };
    let xs = x.select_rows(&probe);
    let ys = y.select_rows(&probe);
    let w = work.snapshot(hyper.activation, hyper.topk_k);
    let a = w.activate(&w.preactivations(&xs)?);
    let mut yhat = a.matmul(&work.w_dec)?;
    yhat.add_row_vector(&work.b_dec);
    let errors: Vec<f64> = (0..probe.len())
        .map(|r| {
            ys.row(r)
                .iter()
                .zip(yhat.row(r))
                .map(|(&t, &p)| (t as f64 - p as f64).powi(2))
                .sum()
        })
        .collect();
    let total: f64 = errors.iter().sum();
    if total <= 0.0 {
        return Ok(());
    }
    let (d_in, c) = work.w_enc.shape();
    let d_out = work.w_dec.cols();
    for &j in dead {
        // sample proportional to squared error
        let mut u = rng.uniform() * total;
        let mut pick = errors.len() - 1;
        for (i, &e) in errors.iter().enumerate() {
            if u < e {
                pick = i;
                break;
            }
            u -= e;
        }
        let resid: Vec<f64> = ys
            .row(pick)
            .iter()
            .zip(yhat.row(pick))
            .map(|(&t, &p)| t as f64 - p as f64)
            .collect();
        let rn = resid.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for (k, v) in work.w_dec.row_mut(j).iter_mut().enumerate() {
            *v = (resid[k] / rn) as f32;
        }
        let xr = xs.row(pick);
        let xn = xr.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
        for i in 0..d_in {
            work.w_enc.set(i, j, (0.2 * xr[i] as f64 / xn) as f32);
            states[0].reset_entry(i * c + j);
        }
        work.b_enc[j] = 0.0;
        states[1].reset_entry(j);
        for k in 0..d_out {
            states[2].reset_entry(j * d_out + k);
        }
        work.theta[j] = JUMP_INIT;
        states[4].reset_entry(j);
    }
    Ok(())
}
