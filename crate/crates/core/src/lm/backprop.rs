//! Closed-form gradients of the next-token cross-entropy for [`Model`].

use super::ff::{gelu_grad, swish, swish_grad, ActivationKind, RMS_EPS};
use super::model::{Model, Params, Trace};
use crate::error::Result;
use crate::numerics::Matrix;

fn layer_norm_backward(
    dy: &Matrix,
    xhat: &Matrix,
    rstd: &[f64],
    g: &[f32],
    dg: &mut [f32],
    db: &mut [f32],
) -> Matrix {
    let (t, d) = dy.shape();
    let mut dx = Matrix::zeros(t, d);
    let mut dxhat = vec![0.0f64; d];
    for r in 0..t {
        let dyr = dy.row(r);
        let xh = xhat.row(r);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let v = dyr[j] as f64 * g[j] as f64;
            dxhat[j] = v;
            mean_dxhat += v;
            mean_dxhat_xhat += v * xh[j] as f64;
            dg[j] += (dyr[j] as f64 * xh[j] as f64) as f32;
            db[j] += dyr[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let out = dx.row_mut(r);
        for j in 0..d {
            out[j] = (rstd[r] * (dxhat[j] - mean_dxhat - xh[j] as f64 * mean_dxhat_xhat)) as f32;
        }
    }
    dx
}

fn add_into(dst: &mut [f32], src: &Matrix) {
    for (a, &b) in dst.iter_mut().zip(src.data()) {
        *a += b;
    }
}

fn add_col_sums(dst: &mut [f32], m: &Matrix) {
    for (a, s) in dst.iter_mut().zip(m.column_sums()) {
        *a += s as f32;
    }
}

/// Summed cross-entropy over all next-token positions and its gradient.
///
/// Returns `(loss_sum, predicted_positions, grads)`; callers divide by the
/// total position count of a batch.
pub(crate) fn loss_and_grads(model: &Model, trace: &Trace) -> Result<(f64, usize, Params)> {
    let p = &model.params;
    let cfg = &model.config;
    let t = trace.tokens.len();
    let mut grads = p.zeros_like();

    // Cross-entropy gradient w.r.t. logits.
    let v = cfg.vocab_size;
    let mut dlogits = Matrix::zeros(t, v);
    let mut loss = 0.0f64;
    let mut count = 0;
    for i in 0..t.saturating_sub(1) {
        let target = trace.tokens[i + 1] as usize;
        let lp = crate::numerics::log_softmax(trace.logits.row(i));
        loss -= lp[target];
        count += 1;
        let row = dlogits.row_mut(i);
        for (j, o) in row.iter_mut().enumerate() {
            *o = (lp[j].exp() - if j == target { 1.0 } else { 0.0 }) as f32;
        }
    }

    grads.w_u = trace.lnf_out.matmul_at(&dlogits)?;
    let dlnf = dlogits.matmul_bt(&p.w_u)?;
    let mut dx = layer_norm_backward(
        &dlnf,
        &trace.lnf_xhat,
        &trace.lnf_rstd,
        &p.lnf_g,
        &mut grads.lnf_g,
        &mut grads.lnf_b,
    );

    let d = cfg.d_model;
    let h = cfg.n_heads;
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();

    for li in (0..cfg.n_layers).rev() {
        let lp = &p.layers[li];
        let lt = &trace.layers[li];
        let gl = &mut grads.layers[li];

        // --- feed-forward branch ---
        let mut dff_raw = dx.clone();
        if let Some(gain) = &lp.ff.post_norm_gain {
            let dgain = gl.ff.post_norm_gain.as_mut().expect("grads mirror params");
            for r in 0..t {
                let x = lt.ff_raw.row(r);
                let dy = dx.row(r);
                let ms = x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / d as f64;
                let rr = 1.0 / (ms + RMS_EPS).sqrt();
                let s: f64 = (0..d).map(|j| gain[j] as f64 * dy[j] as f64 * x[j] as f64).sum();
                let out = dff_raw.row_mut(r);
                for j in 0..d {
                    dgain[j] += (dy[j] as f64 * x[j] as f64 * rr) as f32;
                    out[j] = (rr * gain[j] as f64 * dy[j] as f64
                        - rr * rr * rr * x[j] as f64 * s / d as f64) as f32;
                }
            }
        }
        add_into(gl.ff.w_v.data_mut(), &lt.act.matmul_at(&dff_raw)?);
        add_col_sums(&mut gl.ff.b_v, &dff_raw);
        let dact = dff_raw.matmul_bt(&lp.ff.w_v)?;

        let mut dpre = dact.clone();
        let mut dgate: Option<Matrix> = None;
        match lp.ff.activation {
            ActivationKind::Swiglu => {
                let gate = lt.gate.as_ref().expect("SwiGLU trace has gates");
                let mut dg = dact.clone();
                for (((dp, dgv), &pre), &gv) in dpre
                    .data_mut()
                    .iter_mut()
                    .zip(dg.data_mut().iter_mut())
                    .zip(lt.pre.data())
                    .zip(gate.data())
                {
                    let da = *dp as f64;
                    *dgv = (da * swish(pre as f64)) as f32;
                    *dp = (da * gv as f64 * swish_grad(pre as f64)) as f32;
                }
                dgate = Some(dg);
            }
            ActivationKind::Gelu => {
                for (dp, &pre) in dpre.data_mut().iter_mut().zip(lt.pre.data()) {
                    *dp = (*dp as f64 * gelu_grad(pre as f64)) as f32;
                }
            }
            ActivationKind::Relu => {
                for (dp, &pre) in dpre.data_mut().iter_mut().zip(lt.pre.data()) {
                    if pre <= 0.0 {
                        *dp = 0.0;
                    }
                }
            }
        }
        add_into(gl.ff.w_k.data_mut(), &lt.ff_in.matmul_at(&dpre)?);
        if let Some(bk) = gl.ff.b_k.as_mut() {
            add_col_sums(bk, &dpre);
        }
        let mut dff_in = dpre.matmul_bt(&lp.ff.w_k)?;
        if let (Some(dg), Some(wg)) = (&dgate, &lp.ff.w_g) {
            add_into(
                gl.ff.w_g.as_mut().expect("grads mirror params").data_mut(),
                &lt.ff_in.matmul_at(dg)?,
            );
            dff_in.add_assign(&dg.matmul_bt(wg)?)?;
        }
        let dmid = layer_norm_backward(
            &dff_in,
            &lt.ln2_xhat,
            &lt.ln2_rstd,
            &lp.ln2_g,
            &mut gl.ln2_g,
            &mut gl.ln2_b,
        );
        dx.add_assign(&dmid)?;

        // --- attention branch ---
        add_into(gl.w_o.data_mut(), &lt.attn_cat.matmul_at(&dx)?);
        let dcat = dx.matmul_bt(&lp.w_o)?;
        let mut dq = Matrix::zeros(t, d);
        let mut dk = Matrix::zeros(t, d);
        let mut dv = Matrix::zeros(t, d);
        let mut dp = vec![0.0f64; t];
        for head in 0..h {
            let off = head * dh;
            for i in 0..t {
                let prow = &lt.probs[(head * t + i) * t..(head * t + i + 1) * t];
                let dout = &dcat.row(i)[off..off + dh];
                let mut dot_pdp = 0.0;
                for j in 0..=i {
                    let vj = &lt.v.row(j)[off..off + dh];
                    dp[j] = crate::numerics::dot(dout, vj);
                    dot_pdp += prow[j] as f64 * dp[j];
                    let pij = prow[j] as f64;
                    for (o, &g) in dv.row_mut(j)[off..off + dh].iter_mut().zip(dout) {
                        *o += (pij * g as f64) as f32;
                    }
                }
                for j in 0..=i {
                    let ds = prow[j] as f64 * (dp[j] - dot_pdp) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj: Vec<f32> = lt.k.row(j)[off..off + dh].to_vec();
                    let qi: Vec<f32> = lt.q.row(i)[off..off + dh].to_vec();
                    for (o, &kv) in dq.row_mut(i)[off..off + dh].iter_mut().zip(&kj) {
                        *o += (ds * kv as f64) as f32;
                    }
                    for (o, &qv) in dk.row_mut(j)[off..off + dh].iter_mut().zip(&qi) {
                        *o += (ds * qv as f64) as f32;
                    }
                }
            }
        }
        add_into(gl.w_q.data_mut(), &lt.h1.matmul_at(&dq)?);
        add_into(gl.w_k.data_mut(), &lt.h1.matmul_at(&dk)?);
        add_into(gl.w_v.data_mut(), &lt.h1.matmul_at(&dv)?);
        let mut dh1 = dq.matmul_bt(&lp.w_q)?;
        dh1.add_assign(&dk.matmul_bt(&lp.w_k)?)?;
        dh1.add_assign(&dv.matmul_bt(&lp.w_v)?)?;
        let dln1 = layer_norm_backward(
            &dh1,
            &lt.ln1_xhat,
            &lt.ln1_rstd,
            &lp.ln1_g,
            &mut gl.ln1_g,
            &mut gl.ln1_b,
        );
        dx.add_assign(&dln1)?;
        debug_assert_eq!(lt.x_in.shape(), dx.shape());
    }

    for (i, &tok) in trace.tokens.iter().enumerate() {
        let src = dx.row(i).to_vec();
        for (o, &g) in grads.tok_emb.row_mut(tok as usize).iter_mut().zip(&src) {
            *o += g;
        }
        for (o, &g) in grads.pos_emb.row_mut(i).iter_mut().zip(&src) {
            *o += g;
        }
    }
    Ok((loss, count, grads))
}
