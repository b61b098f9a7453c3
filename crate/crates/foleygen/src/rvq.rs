//! Residual vector quantizer over featurizer latents.
//!
//! Stage k fits its codebook on the residuals left by stages 0..k, so later
//! codebooks refine earlier ones. Training: k-means on a sampled buffer for
//! initialization, then EMA updates over the full set with dead-code
//! reseeding. Encoding is a per-frame greedy argmin cascade.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::featurizer::LatentSequence;
use crate::util::{
    expect_eof, expect_magic, read_f32, read_f32s, read_u16s, read_u32, write_f32, write_f32s,
    write_u16s, write_u32, write_all,
};

/// EMA refinement passes over the data after k-means initialization.
const EMA_PASSES: usize = 2;
/// Rows per EMA batch.
const EMA_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct RVQConfig {
    pub n_q: usize,
    pub codebook_size: usize,
    pub ema_decay: f64,
    /// Clusters whose EMA mass falls below this are reseeded to a random
    /// residual vector.
    pub reseed_threshold: f64,
    pub kmeans_iters: usize,
}

impl Default for RVQConfig {
    fn default() -> Self {
        RVQConfig {
            n_q: 4,
            codebook_size: 64,
            ema_decay: 0.99,
            reseed_threshold: 2.0,
            kmeans_iters: 10,
        }
    }
}

impl RVQConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_q < 1 {
            return Err(Error::Invalid("n_q must be >= 1".into()));
        }
        if self.codebook_size < 2 {
            return Err(Error::Invalid("codebook_size must be >= 2".into()));
        }
        // codes, pad (=size) and bos (=size+1) must all fit in u16
        if self.codebook_size > u16::MAX as usize - 1 {
            return Err(Error::Invalid(format!(
                "codebook_size {} too large for u16 token ids",
                self.codebook_size
            )));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Invalid("ema_decay must be in (0,1)".into()));
        }
        if self.reseed_threshold < 0.0 {
            return Err(Error::Invalid("reseed_threshold must be >= 0".into()));
        }
        if self.kmeans_iters < 1 {
            return Err(Error::Invalid("kmeans_iters must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RVQModel {
    /// n_q matrices, each codebook_size x dim.
    pub codebooks: Vec<Array2<f64>>,
    /// EMA training state, parallel to codebooks.
    pub ema_counts: Vec<Vec<f64>>,
    pub ema_sums: Vec<Array2<f64>>,
    pub config: RVQConfig,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    /// n_q rows of L codes each (codebook-major).
    pub codes: Vec<Vec<u16>>,
    pub codebook_size: usize,
    pub frame_rate_a: u32,
}

impl TokenGrid {
    pub fn n_q(&self) -> usize {
        self.codes.len()
    }

    pub fn len(&self) -> usize {
        self.codes.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn nearest(codebook: &Array2<f64>, x: &[f64]) -> (usize, f64) {
    let (k, d) = codebook.dim();
    let flat = codebook.as_slice().expect("codebooks are standard layout");
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for c in 0..k {
        let row = &flat[c * d..(c + 1) * d];
        let mut dist = 0.0;
        for j in 0..d {
            let t = row[j] - x[j];
            dist += t * t;
        }
        // strict < keeps the lowest index on exact ties
        if dist < best_d {
            best_d = dist;
            best = c;
        }
    }
    (best, best_d)
}

fn row_of(data: &Array2<f64>, i: usize) -> &[f64] {
    let d = data.ncols();
    &data.as_slice().expect("standard layout")[i * d..(i + 1) * d]
}

/// Lloyd iterations on `rows` (indices into data); empty clusters reseed to a
/// random data row. Returns codebook_size x d centroids.
fn kmeans_init(
    data: &Array2<f64>,
    buffer: &[usize],
    k: usize,
    iters: usize,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let d = data.ncols();
    let picks = rand::seq::index::sample(rng, buffer.len(), k.min(buffer.len()));
    let mut centroids = Array2::zeros((k, d));
    for (c, pick) in picks.into_iter().enumerate() {
        centroids
            .row_mut(c)
            .iter_mut()
            .zip(row_of(data, buffer[pick]))
            .for_each(|(dst, &src)| *dst = src);
    }
    // if buffer had fewer rows than k the remainder duplicates row 0; the
    // empty-cluster reseed below will spread them out
    for c in buffer.len().min(k)..k {
        let src = row_of(data, buffer[0]).to_vec();
        centroids.row_mut(c).iter_mut().zip(&src).for_each(|(dst, &s)| *dst = s);
    }

    let mut assign = vec![0usize; buffer.len()];
    for _ in 0..iters {
        for (ai, &ri) in buffer.iter().enumerate() {
            assign[ai] = nearest(&centroids, row_of(data, ri)).0;
        }
        let mut counts = vec![0usize; k];
        let mut sums = Array2::<f64>::zeros((k, d));
        for (ai, &ri) in buffer.iter().enumerate() {
            counts[assign[ai]] += 1;
            sums.row_mut(assign[ai])
                .iter_mut()
                .zip(row_of(data, ri))
                .for_each(|(dst, &src)| *dst += src);
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                centroids
                    .row_mut(c)
                    .iter_mut()
                    .zip(sums.row(c))
                    .for_each(|(dst, &s)| *dst = s * inv);
            } else {
                let ri = buffer[rng.random_range(0..buffer.len())];
                let src = row_of(data, ri).to_vec();
                centroids.row_mut(c).iter_mut().zip(&src).for_each(|(dst, &s)| *dst = s);
            }
        }
    }
    centroids
}

/// One EMA batch update plus dead-code reseeding. Mutates centroids, counts,
/// sums in place; `batch` holds row indices into `data`.
fn ema_update_batch(
    centroids: &mut Array2<f64>,
    counts: &mut [f64],
    sums: &mut Array2<f64>,
    data: &Array2<f64>,
    batch: &[usize],
    decay: f64,
    reseed_threshold: f64,
    rng: &mut ChaCha8Rng,
) {
    let (k, d) = centroids.dim();
    let mut batch_counts = vec![0.0f64; k];
    let mut batch_sums = Array2::<f64>::zeros((k, d));
    for &ri in batch {
        let c = nearest(centroids, row_of(data, ri)).0;
        batch_counts[c] += 1.0;
        batch_sums
            .row_mut(c)
            .iter_mut()
            .zip(row_of(data, ri))
            .for_each(|(dst, &src)| *dst += src);
    }
    for c in 0..k {
        counts[c] = decay * counts[c] + (1.0 - decay) * batch_counts[c];
        for j in 0..d {
            sums[[c, j]] = decay * sums[[c, j]] + (1.0 - decay) * batch_sums[[c, j]];
        }
        if counts[c] > 1e-12 {
            for j in 0..d {
                centroids[[c, j]] = sums[[c, j]] / counts[c];
            }
        }
    }
    for c in 0..k {
        if counts[c] < reseed_threshold {
            let ri = batch[rng.random_range(0..batch.len())];
            let src = row_of(data, ri).to_vec();
            for j in 0..d {
                centroids[[c, j]] = src[j];
                sums[[c, j]] = src[j];
            }
            counts[c] = 1.0;
        }
    }
}

pub fn train_codebooks(
    latents: &[LatentSequence],
    cfg: &RVQConfig,
    seed: u64,
) -> Result<RVQModel> {
    cfg.validate()?;
    let total: usize = latents.iter().map(|z| z.frames.nrows()).sum();
    if latents.is_empty() || total < cfg.codebook_size {
        return Err(Error::Invalid(format!(
            "need at least codebook_size={} latent frames to train, got {total}",
            cfg.codebook_size
        )));
    }
    let d = latents[0].frames.ncols();
    for z in latents {
        if z.frames.ncols() != d {
            return Err(Error::Shape(format!(
                "latent dim mismatch: {} vs {d}",
                z.frames.ncols()
            )));
        }
        if z.frames.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite latent entry in training data".into()));
        }
    }

    // flatten to one residual matrix; stages subtract their reconstruction
    let mut residuals = Array2::<f64>::zeros((total, d));
    let mut at = 0;
    for z in latents {
        for row in z.frames.rows() {
            residuals
                .row_mut(at)
                .iter_mut()
                .zip(row)
                .for_each(|(dst, &src)| *dst = src);
            at += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.codebook_size;
    let mut codebooks = Vec::with_capacity(cfg.n_q);
    let mut all_counts = Vec::with_capacity(cfg.n_q);
    let mut all_sums = Vec::with_capacity(cfg.n_q);

    for _stage in 0..cfg.n_q {
        let buf_n = total.min((32 * k).max(2048));
        let buffer: Vec<usize> =
            rand::seq::index::sample(&mut rng, total, buf_n).into_iter().collect();
        let mut centroids = kmeans_init(&residuals, &buffer, k, cfg.kmeans_iters, &mut rng);

        // seed EMA state from the buffer assignment so established clusters
        // start with honest mass
        let mut counts = vec![0.0f64; k];
        let mut sums = Array2::<f64>::zeros((k, d));
        for &ri in &buffer {
            let c = nearest(&centroids, row_of(&residuals, ri)).0;
            counts[c] += 1.0;
            sums.row_mut(c)
                .iter_mut()
                .zip(row_of(&residuals, ri))
                .for_each(|(dst, &src)| *dst += src);
        }

        for _pass in 0..EMA_PASSES {
            let mut start = 0;
            while start < total {
                let end = (start + EMA_BATCH).min(total);
                let batch: Vec<usize> = (start..end).collect();
                ema_update_batch(
                    &mut centroids,
                    &mut counts,
                    &mut sums,
                    &residuals,
                    &batch,
                    cfg.ema_decay,
                    cfg.reseed_threshold,
                    &mut rng,
                );
                start = end;
            }
        }

        // subtract this stage's reconstruction to form the next residuals
        for i in 0..total {
            let c = nearest(&centroids, row_of(&residuals, i)).0;
            let centroid_row: Vec<f64> = centroids.row(c).iter().copied().collect();
            residuals
                .row_mut(i)
                .iter_mut()
                .zip(&centroid_row)
                .for_each(|(dst, &src)| *dst -= src);
        }

        codebooks.push(centroids);
        all_counts.push(counts);
        all_sums.push(sums);
    }

    Ok(RVQModel {
        codebooks,
        ema_counts: all_counts,
        ema_sums: all_sums,
        config: cfg.clone(),
        dim: d,
    })
}

pub fn rvq_encode(m: &RVQModel, z: &LatentSequence) -> Result<TokenGrid> {
    if z.frames.ncols() != m.dim {
        return Err(Error::Shape(format!(
            "latents have d={} but model expects {}",
            z.frames.ncols(),
            m.dim
        )));
    }
    let l = z.frames.nrows();
    let mut codes = vec![vec![0u16; l]; m.config.n_q];
    let mut residual = vec![0.0f64; m.dim];
    for fi in 0..l {
        residual
            .iter_mut()
            .zip(z.frames.row(fi))
            .for_each(|(dst, &src)| *dst = src);
        for (k, cb) in m.codebooks.iter().enumerate() {
            let (c, _) = nearest(cb, &residual);
            codes[k][fi] = c as u16;
            for j in 0..m.dim {
                residual[j] -= cb[[c, j]];
            }
        }
    }
    Ok(TokenGrid {
        codes,
        codebook_size: m.config.codebook_size,
        frame_rate_a: z.frame_rate_a,
    })
}

pub fn rvq_decode(m: &RVQModel, g: &TokenGrid) -> Result<LatentSequence> {
    decode_prefix(m, g, m.config.n_q)
}

/// Decodes using only the first `n_use` codebooks (refinement measurements).
pub fn decode_prefix(m: &RVQModel, g: &TokenGrid, n_use: usize) -> Result<LatentSequence> {
    if g.n_q() != m.config.n_q {
        return Err(Error::Shape(format!(
            "grid has {} streams but model has {}",
            g.n_q(),
            m.config.n_q
        )));
    }
    if n_use == 0 || n_use > m.config.n_q {
        return Err(Error::Invalid(format!("n_use {} outside 1..={}", n_use, m.config.n_q)));
    }
    let l = g.len();
    let mut frames = Array2::<f64>::zeros((l, m.dim));
    for (k, stream) in g.codes.iter().take(n_use).enumerate() {
        if stream.len() != l {
            return Err(Error::Shape("ragged token grid".into()));
        }
        for (fi, &code) in stream.iter().enumerate() {
            if code as usize >= m.config.codebook_size {
                return Err(Error::Format(format!(
                    "code {code} out of range for codebook of {} (stream {k}, frame {fi}); \
                     token data is corrupted",
                    m.config.codebook_size
                )));
            }
            for j in 0..m.dim {
                frames[[fi, j]] += m.codebooks[k][[code as usize, j]];
            }
        }
    }
    Ok(LatentSequence { frames, frame_rate_a: g.frame_rate_a })
}

// ---------------------------------------------------------------------------
// Files

/// Model file: "RVQM", config block (u32 n_q, u32 codebook_size, u32 dim,
/// f32 ema_decay, f32 reseed_threshold, u32 kmeans_iters), then per stage a
/// codebook_size x dim f32 matrix, row-major little-endian.
pub fn save_model(path: &Path, m: &RVQModel) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_all(&mut w, b"RVQM")?;
    write_u32(&mut w, m.config.n_q as u32)?;
    write_u32(&mut w, m.config.codebook_size as u32)?;
    write_u32(&mut w, m.dim as u32)?;
    write_f32(&mut w, m.config.ema_decay as f32)?;
    write_f32(&mut w, m.config.reseed_threshold as f32)?;
    write_u32(&mut w, m.config.kmeans_iters as u32)?;
    for cb in &m.codebooks {
        let vals: Vec<f32> = cb.iter().map(|&x| x as f32).collect();
        write_f32s(&mut w, &vals)?;
    }
    Ok(())
}

pub fn load_model(path: &Path) -> Result<RVQModel> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    expect_magic(&mut r, b"RVQM", "rvq model file")?;
    let n_q = read_u32(&mut r, "n_q")? as usize;
    let codebook_size = read_u32(&mut r, "codebook_size")? as usize;
    let dim = read_u32(&mut r, "dim")? as usize;
    let ema_decay = read_f32(&mut r, "ema_decay")? as f64;
    let reseed_threshold = read_f32(&mut r, "reseed_threshold")? as f64;
    let kmeans_iters = read_u32(&mut r, "kmeans_iters")? as usize;
    let config = RVQConfig { n_q, codebook_size, ema_decay, reseed_threshold, kmeans_iters };
    config.validate()?;
    if dim == 0 {
        return Err(Error::Format("rvq model has dim 0".into()));
    }
    let mut codebooks = Vec::with_capacity(n_q);
    for k in 0..n_q {
        let vals = read_f32s(&mut r, codebook_size * dim, &format!("codebook {k}"))?;
        let vals64: Vec<f64> = vals.into_iter().map(f64::from).collect();
        codebooks.push(
            Array2::from_shape_vec((codebook_size, dim), vals64)
                .map_err(|e| Error::Format(format!("codebook {k}: {e}")))?,
        );
    }
    expect_eof(&mut r, "rvq model file")?;
    Ok(RVQModel {
        codebooks,
        ema_counts: vec![vec![0.0; codebook_size]; n_q],
        ema_sums: vec![Array2::zeros((codebook_size, dim)); n_q],
        config,
        dim,
    })
}

/// Token file: "RVQT", u32 n_q, u32 L, u32 codebook_size, u32 frame_rate_a,
/// payload = codes codebook-major as u16 little-endian.
pub fn save_tokens(path: &Path, g: &TokenGrid) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_all(&mut w, b"RVQT")?;
    write_u32(&mut w, g.n_q() as u32)?;
    write_u32(&mut w, g.len() as u32)?;
    write_u32(&mut w, g.codebook_size as u32)?;
    write_u32(&mut w, g.frame_rate_a)?;
    for stream in &g.codes {
        write_u16s(&mut w, stream)?;
    }
    Ok(())
}

pub fn load_tokens(path: &Path) -> Result<TokenGrid> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    expect_magic(&mut r, b"RVQT", "token file")?;
    let n_q = read_u32(&mut r, "n_q")? as usize;
    let l = read_u32(&mut r, "L")? as usize;
    let codebook_size = read_u32(&mut r, "codebook_size")? as usize;
    let frame_rate_a = read_u32(&mut r, "frame_rate_a")?;
    if n_q == 0 || l == 0 || codebook_size == 0 {
        return Err(Error::Format(format!(
            "token file with empty dimensions: n_q={n_q} L={l} codebook_size={codebook_size}"
        )));
    }
    let mut codes = Vec::with_capacity(n_q);
    for k in 0..n_q {
        let stream = read_u16s(&mut r, l, &format!("token stream {k}"))?;
        if let Some(&bad) = stream.iter().find(|&&c| c as usize >= codebook_size) {
            return Err(Error::Format(format!(
                "code {bad} out of range for codebook of {codebook_size} in stream {k}; \
                 token file is corrupted"
            )));
        }
        codes.push(stream);
    }
    expect_eof(&mut r, "token file")?;
    Ok(TokenGrid { codes, codebook_size, frame_rate_a })
}
