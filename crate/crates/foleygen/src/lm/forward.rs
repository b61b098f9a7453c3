//! Forward pass: full-sequence (training, returns a cache for backward) and
//! incremental single-position (generation, KV cache per layer).
//!
//! Sequence layout: rows 0..T are the condition prefix (projected visual
//! features or the broadcast null row), row T is BOS, rows T+1.. hold the
//! delayed step tuples. Logits at audio position p predict tuple p; the last
//! audio row's logits have no target.

use ndarray::{s, Array2};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::masks::AttentionMask;
use crate::patterns::StepSequence;
use crate::visual::VisualFeatures;

use super::{LMParams, ModelConfig};

pub enum CondSource<'a> {
    Visual(&'a VisualFeatures),
    /// Null condition broadcast over `t` prefix rows.
    Null { t: usize },
}

impl CondSource<'_> {
    pub fn t(&self) -> usize {
        match self {
            CondSource::Visual(f) => f.t(),
            CondSource::Null { t } => *t,
        }
    }
}

pub(crate) struct LnCache {
    pub xhat: Array2<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) struct LayerCache {
    pub ln1: LnCache,
    pub ln1_out: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Per head, n x n; masked-out entries are exact zeros.
    pub probs: Vec<Array2<f64>>,
    /// Concatenated per-head contexts, before the output projection.
    pub att: Array2<f64>,
    pub drop_attn: Option<Array2<f64>>,
    pub ln2: LnCache,
    pub ln2_out: Array2<f64>,
    pub h_pre: Array2<f64>,
    pub h_act: Array2<f64>,
    pub drop_ff: Option<Array2<f64>>,
}

pub(crate) enum CondCache {
    Visual { feats: Array2<f64> },
    Null,
}

/// Opaque activation cache handed from `forward` to `backward`.
pub struct Cache {
    pub(crate) cond: CondCache,
    /// Token ids per audio position (BOS tuple first), s_audio x n_q.
    pub(crate) ids: Vec<Vec<u16>>,
    pub(crate) layers: Vec<LayerCache>,
    pub(crate) final_ln: LnCache,
    /// Post-final-norm activations, n x d.
    pub(crate) y: Array2<f64>,
    pub(crate) t_visual: usize,
}

pub struct ForwardOutput {
    /// Per stream: s_audio x vocab.
    pub logits: Vec<Array2<f64>>,
    pub cache: Option<Cache>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise layer norm; returns output and the cache backward needs.
fn layer_norm(x: &Array2<f64>, g: &[f64], b: &[f64]) -> (Array2<f64>, LnCache) {
    let (n, d) = x.dim();
    let mut out = Array2::zeros((n, d));
    let mut xhat = Array2::zeros((n, d));
    let mut rstd = vec![0.0; n];
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (x[[i, j]] - mean) * r;
            xhat[[i, j]] = h;
            out[[i, j]] = h * g[j] + b[j];
        }
    }
    (out, LnCache { xhat, rstd })
}

fn add_bias(x: &mut Array2<f64>, b: &[f64]) {
    for mut row in x.rows_mut() {
        row.iter_mut().zip(b).for_each(|(v, &bb)| *v += bb);
    }
}

/// Softmax over allowed entries only; disallowed stay exactly zero.
fn masked_softmax_row(scores: &mut [f64], allowed: &[bool]) {
    let mut max = f64::NEG_INFINITY;
    for (s, &a) in scores.iter().zip(allowed) {
        if a && *s > max {
            max = *s;
        }
    }
    let mut sum = 0.0;
    for (s, &a) in scores.iter_mut().zip(allowed) {
        if a {
            *s = (*s - max).exp();
            sum += *s;
        } else {
            *s = 0.0;
        }
    }
    if sum > 0.0 {
        for (s, &a) in scores.iter_mut().zip(allowed) {
            if a {
                *s /= sum;
            }
        }
    }
}

fn dropout_mask(n: usize, d: usize, rate: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let keep = 1.0 - rate;
    let mut m = Array2::zeros((n, d));
    for v in m.iter_mut() {
        *v = if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
    }
    m
}

fn embed_audio_row(p: &LMParams, ids: &[u16], local_pos: usize, out: &mut [f64]) {
    let d = p.config.d_model;
    out.copy_from_slice(&p.pos.as_slice().unwrap()[local_pos * d..(local_pos + 1) * d]);
    for (k, &id) in ids.iter().enumerate() {
        let table = &p.embed_table(k).as_slice().unwrap()[id as usize * d..(id as usize + 1) * d];
        for (o, &e) in out.iter_mut().zip(table) {
            *o += e;
        }
    }
}

impl LMParams {
    fn embed_table(&self, k: usize) -> &Array2<f64> {
        &self.set.embed[k]
    }
}

fn validate_shapes(
    cfg: &ModelConfig,
    cond: &CondSource<'_>,
    steps: &StepSequence,
    mask: &AttentionMask,
) -> Result<(usize, usize)> {
    let t = cond.t();
    let s_audio = steps.len() + 1;
    if steps.n_q != cfg.n_q {
        return Err(Error::Shape(format!(
            "steps have {} streams, model expects {}",
            steps.n_q, cfg.n_q
        )));
    }
    if steps.codebook_size != cfg.codebook_size {
        return Err(Error::Shape(format!(
            "steps use codebook_size {}, model expects {}",
            steps.codebook_size, cfg.codebook_size
        )));
    }
    if mask.t_visual != t || mask.s_audio != s_audio {
        return Err(Error::Shape(format!(
            "mask is T={} S={}, inputs are T={t} S={s_audio}",
            mask.t_visual, mask.s_audio
        )));
    }
    if t == 0 || t > cfg.max_t {
        return Err(Error::Shape(format!("prefix length {t} outside 1..={}", cfg.max_t)));
    }
    if s_audio > cfg.max_s {
        return Err(Error::Shape(format!(
            "audio length {s_audio} exceeds max_s {}",
            cfg.max_s
        )));
    }
    if let CondSource::Visual(f) = cond {
        if f.d_v() != cfg.d_v {
            return Err(Error::Shape(format!(
                "visual features have D_v={}, model expects {}",
                f.d_v(),
                cfg.d_v
            )));
        }
    }
    Ok((t, s_audio))
}

pub fn forward(
    p: &LMParams,
    cond: CondSource<'_>,
    steps: &StepSequence,
    mask: &AttentionMask,
    want_cache: bool,
    dropout_seed: Option<u64>,
) -> Result<ForwardOutput> {
    let cfg = &p.config;
    let (t, s_audio) = validate_shapes(cfg, &cond, steps, mask)?;
    let d = cfg.d_model;
    let n = t + s_audio;
    let vocab = cfg.vocab();

    // input rows
    let mut x = Array2::<f64>::zeros((n, d));
    let cond_cache = match &cond {
        CondSource::Visual(f) => {
            let projected = f.feats.dot(&p.set.proj.weight);
            for i in 0..t {
                for j in 0..d {
                    x[[i, j]] = projected[[i, j]] + p.set.proj.bias[j] + p.pos[[i, j]];
                }
            }
            CondCache::Visual { feats: f.feats.clone() }
        }
        CondSource::Null { .. } => {
            for i in 0..t {
                for j in 0..d {
                    x[[i, j]] = p.set.null_cond[j] + p.pos[[i, j]];
                }
            }
            CondCache::Null
        }
    };

    let mut ids = Vec::with_capacity(s_audio);
    ids.push(vec![cfg.bos_id(); cfg.n_q]);
    for tuple in &steps.steps {
        if tuple.len() != cfg.n_q {
            return Err(Error::Shape("ragged step sequence".into()));
        }
        for &id in tuple {
            if id as usize >= vocab {
                return Err(Error::Invalid(format!("token id {id} outside vocab {vocab}")));
            }
        }
        ids.push(tuple.clone());
    }
    for (pidx, tuple) in ids.iter().enumerate() {
        let mut row = vec![0.0; d];
        embed_audio_row(p, tuple, pidx, &mut row);
        x.row_mut(t + pidx).iter_mut().zip(&row).for_each(|(dst, &src)| *dst = src);
    }

    let mut drop_rng = dropout_seed
        .filter(|_| cfg.dropout_rate > 0.0)
        .map(ChaCha8Rng::seed_from_u64);

    let n_heads = cfg.n_heads;
    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut layer_caches = Vec::with_capacity(cfg.n_layers);

    for lp in &p.set.layers {
        let (ln1_out, ln1) = layer_norm(&x, &lp.ln1_g, &lp.ln1_b);
        let mut q = ln1_out.dot(&lp.wq);
        add_bias(&mut q, &lp.bq);
        let mut k = ln1_out.dot(&lp.wk);
        add_bias(&mut k, &lp.bk);
        let mut v = ln1_out.dot(&lp.wv);
        add_bias(&mut v, &lp.bv);

        let mut att = Array2::<f64>::zeros((n, d));
        let mut probs_all = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|s| s * scale);
            for i in 0..n {
                masked_softmax_row(
                    scores.row_mut(i).as_slice_mut().unwrap(),
                    &mask.allowed[i],
                );
            }
            let ctx = scores.dot(&vh);
            att.slice_mut(cols).assign(&ctx);
            probs_all.push(scores);
        }
        let mut attn_out = att.dot(&lp.wo);
        add_bias(&mut attn_out, &lp.bo);
        let drop_attn = drop_rng.as_mut().map(|rng| dropout_mask(n, d, cfg.dropout_rate, rng));
        if let Some(m) = &drop_attn {
            attn_out *= m;
        }
        let x_mid = &x + &attn_out;

        let (ln2_out, ln2) = layer_norm(&x_mid, &lp.ln2_g, &lp.ln2_b);
        let mut h_pre = ln2_out.dot(&lp.w1);
        add_bias(&mut h_pre, &lp.b1);
        let h_act = h_pre.mapv(gelu);
        let mut ff_out = h_act.dot(&lp.w2);
        add_bias(&mut ff_out, &lp.b2);
        let drop_ff = drop_rng.as_mut().map(|rng| dropout_mask(n, d, cfg.dropout_rate, rng));
        if let Some(m) = &drop_ff {
            ff_out *= m;
        }
        let x_next = &x_mid + &ff_out;

        layer_caches.push(LayerCache {
            ln1,
            ln1_out,
            q,
            k,
            v,
            probs: probs_all,
            att,
            drop_attn,
            ln2,
            ln2_out,
            h_pre,
            h_act,
            drop_ff,
        });
        x = x_next;
    }

    let (y, final_ln) = layer_norm(&x, &p.set.final_ln_g, &p.set.final_ln_b);
    let y_audio = y.slice(s![t.., ..]);
    let mut logits = Vec::with_capacity(cfg.n_q);
    for kdx in 0..cfg.n_q {
        let mut lg = y_audio.dot(&p.set.heads[kdx]);
        add_bias(&mut lg, &p.set.head_b[kdx]);
        logits.push(lg);
    }

    let cache = want_cache.then_some(Cache {
        cond: cond_cache,
        ids,
        layers: layer_caches,
        final_ln,
        y,
        t_visual: t,
    });
    Ok(ForwardOutput { logits, cache })
}

// ---------------------------------------------------------------------------
// Incremental decoding

struct LayerKV {
    k: Vec<f64>,
    v: Vec<f64>,
}

/// One autoregressive stream: prefix rows pushed first, then one audio
/// position at a time. Holds per-layer KV caches; parameters stay borrowed.
pub struct StreamState<'a> {
    p: &'a LMParams,
    mask: &'a AttentionMask,
    kv: Vec<LayerKV>,
    /// Rows pushed so far (absolute position).
    cursor: usize,
    t_seen: usize,
    s_seen: usize,
}

impl<'a> StreamState<'a> {
    pub fn new(p: &'a LMParams, mask: &'a AttentionMask) -> StreamState<'a> {
        StreamState {
            p,
            mask,
            kv: (0..p.config.n_layers)
                .map(|_| LayerKV { k: Vec::new(), v: Vec::new() })
                .collect(),
            cursor: 0,
            t_seen: 0,
            s_seen: 0,
        }
    }

    /// Pushes the whole condition prefix (already projected to d_model or the
    /// broadcast null row); adds positional rows itself.
    pub fn prime(&mut self, cond_rows: &Array2<f64>) -> Result<()> {
        if self.cursor != 0 {
            return Err(Error::Invalid("prefix must be pushed before audio".into()));
        }
        if cond_rows.nrows() != self.mask.t_visual || cond_rows.ncols() != self.p.config.d_model {
            return Err(Error::Shape(format!(
                "prefix is {}x{}, expected {}x{}",
                cond_rows.nrows(),
                cond_rows.ncols(),
                self.mask.t_visual,
                self.p.config.d_model
            )));
        }
        for ti in 0..cond_rows.nrows() {
            let mut row: Vec<f64> = cond_rows.row(ti).to_vec();
            for (j, v) in row.iter_mut().enumerate() {
                *v += self.p.pos[[ti, j]];
            }
            self.advance(row);
            self.t_seen += 1;
        }
        Ok(())
    }

    /// Pushes one audio position: `None` for BOS, otherwise the previous
    /// step's token tuple. Returns per-stream logits for the next tuple.
    pub fn step(&mut self, tuple: Option<&[u16]>) -> Result<Vec<Vec<f64>>> {
        let cfg = &self.p.config;
        if self.t_seen != self.mask.t_visual {
            return Err(Error::Invalid("audio pushed before the full prefix".into()));
        }
        if self.t_seen + self.s_seen >= self.mask.allowed.len() {
            return Err(Error::Invalid("stream ran past its mask".into()));
        }
        let bos = vec![cfg.bos_id(); cfg.n_q];
        let ids = match tuple {
            None => {
                if self.s_seen != 0 {
                    return Err(Error::Invalid("BOS only valid at audio position 0".into()));
                }
                &bos[..]
            }
            Some(ids) => {
                if self.s_seen == 0 {
                    return Err(Error::Invalid("audio position 0 must be BOS".into()));
                }
                if ids.len() != cfg.n_q {
                    return Err(Error::Shape("tuple arity mismatch".into()));
                }
                for &id in ids {
                    if id as usize >= cfg.vocab() {
                        return Err(Error::Invalid(format!(
                            "token id {id} outside vocab {}",
                            cfg.vocab()
                        )));
                    }
                }
                ids
            }
        };
        let mut row = vec![0.0; cfg.d_model];
        embed_audio_row(self.p, ids, self.s_seen, &mut row);
        let y = self.advance(row);
        self.s_seen += 1;

        let mut logits = Vec::with_capacity(cfg.n_q);
        for kdx in 0..cfg.n_q {
            let head = &self.p.set.heads[kdx];
            let hb = &self.p.set.head_b[kdx];
            let vocab = cfg.vocab();
            let mut lg = vec![0.0; vocab];
            let hs = head.as_slice().unwrap();
            for (j, yv) in y.iter().enumerate() {
                let wrow = &hs[j * vocab..(j + 1) * vocab];
                for (o, &w) in lg.iter_mut().zip(wrow) {
                    *o += yv * w;
                }
            }
            for (o, &b) in lg.iter_mut().zip(hb) {
                *o += b;
            }
            logits.push(lg);
        }
        Ok(logits)
    }

    /// Runs one row through all layers, growing the KV caches; returns the
    /// post-final-norm activation.
    fn advance(&mut self, mut row: Vec<f64>) -> Vec<f64> {
        let cfg = &self.p.config;
        let d = cfg.d_model;
        let dh = cfg.d_head();
        let n_heads = cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let i = self.cursor;
        let allowed = &self.mask.allowed[i];

        for (l, lp) in self.p.set.layers.iter().enumerate() {
            let ln1 = ln_row(&row, &lp.ln1_g, &lp.ln1_b);
            let q = affine_row(&ln1, &lp.wq, &lp.bq);
            let k = affine_row(&ln1, &lp.wk, &lp.bk);
            let v = affine_row(&ln1, &lp.wv, &lp.bv);
            let kvs = &mut self.kv[l];
            kvs.k.extend_from_slice(&k);
            kvs.v.extend_from_slice(&v);
            let n_keys = i + 1;
            let mut ctx = vec![0.0; d];
            for h in 0..n_heads {
                let off = h * dh;
                // scores for this query against all cached keys
                let mut scores = vec![f64::NEG_INFINITY; n_keys];
                for j in 0..n_keys {
                    if !allowed[j] {
                        continue;
                    }
                    let krow = &kvs.k[j * d + off..j * d + off + dh];
                    let mut s = 0.0;
                    for (a, b) in q[off..off + dh].iter().zip(krow) {
                        s += a * b;
                    }
                    scores[j] = s * scale;
                }
                let mut max = f64::NEG_INFINITY;
                for (j, &sc) in scores.iter().enumerate() {
                    if allowed[j] && sc > max {
                        max = sc;
                    }
                }
                let mut sum = 0.0;
                for (j, sc) in scores.iter_mut().enumerate() {
                    if allowed[j] {
                        *sc = (*sc - max).exp();
                        sum += *sc;
                    } else {
                        *sc = 0.0;
                    }
                }
                if sum > 0.0 {
                    for (j, &p_j) in scores.iter().enumerate() {
                        if p_j == 0.0 {
                            continue;
                        }
                        let w = p_j / sum;
                        let vrow = &kvs.v[j * d + off..j * d + off + dh];
                        for (c, &vv) in ctx[off..off + dh].iter_mut().zip(vrow) {
                            *c += w * vv;
                        }
                    }
                }
            }
            let attn_out = affine_row(&ctx, &lp.wo, &lp.bo);
            for (r, a) in row.iter_mut().zip(&attn_out) {
                *r += a;
            }
            let ln2 = ln_row(&row, &lp.ln2_g, &lp.ln2_b);
            let h_pre = affine_row(&ln2, &lp.w1, &lp.b1);
            let h_act: Vec<f64> = h_pre.iter().map(|&x| gelu(x)).collect();
            let ff_out = affine_row(&h_act, &lp.w2, &lp.b2);
            for (r, f) in row.iter_mut().zip(&ff_out) {
                *r += f;
            }
        }
        self.cursor += 1;
        ln_row(&row, &self.p.set.final_ln_g, &self.p.set.final_ln_b)
    }
}

fn ln_row(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let r = 1.0 / (var + LN_EPS).sqrt();
    x.iter().zip(g.iter().zip(b)).map(|(&v, (&gg, &bb))| (v - mean) * r * gg + bb).collect()
}

/// row (1 x in) times w (in x out) plus bias.
fn affine_row(x: &[f64], w: &Array2<f64>, b: &[f64]) -> Vec<f64> {
    let (din, dout) = w.dim();
    debug_assert_eq!(x.len(), din);
    let ws = w.as_slice().unwrap();
    let mut out = b.to_vec();
    for (j, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        let wrow = &ws[j * dout..(j + 1) * dout];
        for (o, &wv) in out.iter_mut().zip(wrow) {
            *o += xv * wv;
        }
    }
    out
}
