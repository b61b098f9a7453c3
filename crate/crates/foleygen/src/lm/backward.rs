//! Loss and the hand-written backward pass.
//!
//! Loss is mean cross-entropy over the included slots: position p
//! (0..S_steps) stream k counts unless the delay layout mandates a pad
//! there. The final audio row predicts past the sequence and is skipped.

use ndarray::{s, Array2};

use crate::error::{Error, Result};
use crate::patterns::{is_mandated_pad, StepSequence};

use super::forward::{gelu_prime, Cache, CondCache, LnCache};
use super::{LMParams, ParamSet};

/// Returns (mean CE, per-stream dlogits). dlogits rows for excluded slots
/// are zero, so backward can consume them uniformly.
pub fn loss_and_dlogits(
    logits: &[Array2<f64>],
    steps: &StepSequence,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let n_q = steps.n_q;
    if logits.len() != n_q {
        return Err(Error::Shape(format!(
            "{} logit tables for {} streams",
            logits.len(),
            n_q
        )));
    }
    let s_steps = steps.len();
    let s_audio = s_steps + 1;
    let l_frames = steps.n_frames();
    let vocab = logits[0].ncols();
    for lg in logits {
        if lg.dim() != (s_audio, vocab) {
            return Err(Error::Shape("logit table shape mismatch".into()));
        }
    }
    let included = n_q * l_frames;
    if included == 0 {
        return Err(Error::Invalid("no supervised slots".into()));
    }

    let mut total = 0.0;
    let mut dlogits: Vec<Array2<f64>> = (0..n_q).map(|_| Array2::zeros((s_audio, vocab))).collect();
    let inv_m = 1.0 / included as f64;
    for p in 0..s_steps {
        for k in 0..n_q {
            if is_mandated_pad(p, k, l_frames) {
                continue;
            }
            let target = steps.steps[p][k] as usize;
            if target >= vocab {
                return Err(Error::Invalid(format!(
                    "target {target} outside vocab {vocab}"
                )));
            }
            let row = logits[k].row(p);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum_exp.ln();
            total += lse - row[target];
            let mut drow = dlogits[k].row_mut(p);
            for (j, dv) in drow.iter_mut().enumerate() {
                let soft = (row[j] - lse).exp();
                *dv = (soft - if j == target { 1.0 } else { 0.0 }) * inv_m;
            }
        }
    }
    let loss = total * inv_m;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    Ok((loss, dlogits))
}

fn col_sums(x: &Array2<f64>, out: &mut [f64]) {
    for row in x.rows() {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// dy -> dx through layer norm, accumulating dgamma/dbeta.
fn ln_backward(
    dy: &Array2<f64>,
    ln: &LnCache,
    g: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Array2<f64> {
    let (n, d) = dy.dim();
    let mut dx = Array2::zeros((n, d));
    let inv_d = 1.0 / d as f64;
    for i in 0..n {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            let dxh = dy[[i, j]] * g[j];
            dbeta[j] += dy[[i, j]];
            dgamma[j] += dy[[i, j]] * ln.xhat[[i, j]];
            m1 += dxh;
            m2 += dxh * ln.xhat[[i, j]];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let r = ln.rstd[i];
        for j in 0..d {
            let dxh = dy[[i, j]] * g[j];
            dx[[i, j]] = r * (dxh - m1 - ln.xhat[[i, j]] * m2);
        }
    }
    dx
}

/// Full backward pass; returns gradients shaped like the parameter set.
pub fn backward(p: &LMParams, cache: &Cache, dlogits: &[Array2<f64>]) -> Result<ParamSet> {
    let cfg = &p.config;
    let mut g = ParamSet::zeros(cfg);
    let t = cache.t_visual;
    let (n, d) = cache.y.dim();
    let n_heads = cfg.n_heads;
    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f64).sqrt();

    // output heads
    let y_audio = cache.y.slice(s![t.., ..]);
    let mut dy = Array2::<f64>::zeros((n, d));
    for k in 0..cfg.n_q {
        g.heads[k] += &y_audio.t().dot(&dlogits[k]);
        col_sums(&dlogits[k], &mut g.head_b[k]);
        let dpart = dlogits[k].dot(&p.set.heads[k].t());
        dy.slice_mut(s![t.., ..]).zip_mut_with(&dpart, |a, &b| *a += b);
    }

    // final norm
    let mut dx = ln_backward(
        &dy,
        &cache.final_ln,
        &p.set.final_ln_g,
        &mut g.final_ln_g,
        &mut g.final_ln_b,
    );

    for (l, lp) in p.set.layers.iter().enumerate().rev() {
        let lc = &cache.layers[l];
        let gl = &mut g.layers[l];

        // feed-forward branch
        let dff_out = match &lc.drop_ff {
            Some(m) => &dx * m,
            None => dx.clone(),
        };
        let dh_act = dff_out.dot(&lp.w2.t());
        gl.w2 += &lc.h_act.t().dot(&dff_out);
        col_sums(&dff_out, &mut gl.b2);
        let mut dh_pre = dh_act;
        dh_pre.zip_mut_with(&lc.h_pre, |dv, &x| *dv *= gelu_prime(x));
        let dln2_out = dh_pre.dot(&lp.w1.t());
        gl.w1 += &lc.ln2_out.t().dot(&dh_pre);
        col_sums(&dh_pre, &mut gl.b1);
        let dx_ln2 = ln_backward(&dln2_out, &lc.ln2, &lp.ln2_g, &mut gl.ln2_g, &mut gl.ln2_b);
        let dx_mid = &dx + &dx_ln2;

        // attention branch
        let dattn_out = match &lc.drop_attn {
            Some(m) => &dx_mid * m,
            None => dx_mid.clone(),
        };
        let datt = dattn_out.dot(&lp.wo.t());
        gl.wo += &lc.att.t().dot(&dattn_out);
        col_sums(&dattn_out, &mut gl.bo);

        let mut dq = Array2::<f64>::zeros((n, d));
        let mut dk = Array2::<f64>::zeros((n, d));
        let mut dv = Array2::<f64>::zeros((n, d));
        for h in 0..n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let probs = &lc.probs[h];
            let vh = lc.v.slice(cols);
            let dctx = datt.slice(cols);
            let dprobs = dctx.dot(&vh.t());
            dv.slice_mut(cols).assign(&probs.t().dot(&dctx));
            // softmax backward; zero prob rows/entries contribute nothing
            let mut dscores = Array2::<f64>::zeros((n, n));
            for i in 0..n {
                let prow = probs.row(i);
                let dprow = dprobs.row(i);
                let dot: f64 = prow.iter().zip(dprow.iter()).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    let pij = prow[j];
                    if pij != 0.0 {
                        dscores[[i, j]] = pij * (dprow[j] - dot);
                    }
                }
            }
            dscores.mapv_inplace(|v| v * scale);
            let kh = lc.k.slice(cols);
            let qh = lc.q.slice(cols);
            dq.slice_mut(cols).assign(&dscores.dot(&kh));
            dk.slice_mut(cols).assign(&dscores.t().dot(&qh));
        }

        gl.wq += &lc.ln1_out.t().dot(&dq);
        col_sums(&dq, &mut gl.bq);
        gl.wk += &lc.ln1_out.t().dot(&dk);
        col_sums(&dk, &mut gl.bk);
        gl.wv += &lc.ln1_out.t().dot(&dv);
        col_sums(&dv, &mut gl.bv);
        let dln1_out = dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t());
        let dx_ln1 = ln_backward(&dln1_out, &lc.ln1, &lp.ln1_g, &mut gl.ln1_g, &mut gl.ln1_b);
        dx = dx_mid + dx_ln1;
    }

    // input rows: audio embeddings, visual projection or null row
    for (pidx, tuple) in cache.ids.iter().enumerate() {
        let drow = dx.row(t + pidx);
        for (k, &id) in tuple.iter().enumerate() {
            let mut erow = g.embed[k].row_mut(id as usize);
            erow.zip_mut_with(&drow, |a, &b| *a += b);
        }
    }
    let dcond = dx.slice(s![..t, ..]);
    match &cache.cond {
        CondCache::Visual { feats } => {
            g.proj.weight += &feats.t().dot(&dcond);
            col_sums(&dcond.to_owned(), &mut g.proj.bias);
        }
        CondCache::Null => {
            for row in dcond.rows() {
                for (o, &v) in g.null_cond.iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
    }
    Ok(g)
}
