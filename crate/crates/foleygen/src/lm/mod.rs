//! Decoder-only transformer over delayed audio token streams with a visual
//! prefix. Parameters are f64 in memory (gradient checks need the headroom)
//! and f32 in checkpoint files.

mod backward;
mod forward;
mod train;

pub use backward::{backward, loss_and_dlogits};
pub use forward::{forward, CondSource, ForwardOutput, StreamState};
pub use train::{lr_schedule, train_step, AdamState, StepStats, TrainConfig, TrainExample};

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use crate::error::{Error, Result};
use crate::util::{
    expect_eof, expect_magic, read_f32, read_f32s, read_u32, standard_normal, write_all,
    write_f32, write_f32s, write_u32,
};
use crate::visual::ProjectionParams;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_q: usize,
    pub codebook_size: usize,
    /// Visual feature width accepted by the projection layer.
    pub d_v: usize,
    pub max_t: usize,
    pub max_s: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            n_q: 4,
            codebook_size: 64,
            d_v: 8,
            max_t: 16,
            max_s: 256,
            dropout_rate: 0.0,
        }
    }
}

impl ModelConfig {
    /// Codes plus pad plus bos.
    pub fn vocab(&self) -> usize {
        self.codebook_size + 2
    }

    pub fn pad_id(&self) -> u16 {
        self.codebook_size as u16
    }

    pub fn bos_id(&self) -> u16 {
        self.codebook_size as u16 + 1
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.n_heads == 0
            || self.d_model == 0
            || self.d_ff == 0
            || self.n_q == 0
            || self.max_t == 0
            || self.max_s == 0
        {
            return Err(Error::Invalid("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.codebook_size < 2 || self.codebook_size > u16::MAX as usize - 1 {
            return Err(Error::Invalid(format!(
                "codebook_size {} outside supported range",
                self.codebook_size
            )));
        }
        if self.d_v == 0 {
            return Err(Error::Invalid("d_v must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Invalid(format!(
                "dropout_rate {} outside [0,1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: Array2<f64>,
    pub bq: Vec<f64>,
    pub wk: Array2<f64>,
    pub bk: Vec<f64>,
    pub wv: Array2<f64>,
    pub bv: Vec<f64>,
    pub wo: Array2<f64>,
    pub bo: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w1: Array2<f64>,
    pub b1: Vec<f64>,
    pub w2: Array2<f64>,
    pub b2: Vec<f64>,
}

/// Every trainable tensor of the model; doubles as the gradient holder.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    /// Per-stream token embedding tables, vocab x d_model.
    pub embed: Vec<Array2<f64>>,
    pub layers: Vec<LayerParams>,
    pub final_ln_g: Vec<f64>,
    pub final_ln_b: Vec<f64>,
    /// Per-stream output heads, d_model x vocab.
    pub heads: Vec<Array2<f64>>,
    pub head_b: Vec<Vec<f64>>,
    pub proj: ProjectionParams,
    /// Learned null-condition row, broadcast over the prefix when the visual
    /// condition is dropped.
    pub null_cond: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LMParams {
    pub set: ParamSet,
    /// Fixed sinusoidal table, not trained; rows cover both block-local
    /// position ranges.
    pub pos: Array2<f64>,
    pub config: ModelConfig,
}

/// Borrowed view of one tensor for checkpointing and optimizer loops.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
    /// Weight decay applies only to rank-2 tensors.
    pub decay: bool,
}

pub struct TensorMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
    pub decay: bool,
}

fn zeros_layer(cfg: &ModelConfig) -> LayerParams {
    let d = cfg.d_model;
    let f = cfg.d_ff;
    LayerParams {
        ln1_g: vec![0.0; d],
        ln1_b: vec![0.0; d],
        wq: Array2::zeros((d, d)),
        bq: vec![0.0; d],
        wk: Array2::zeros((d, d)),
        bk: vec![0.0; d],
        wv: Array2::zeros((d, d)),
        bv: vec![0.0; d],
        wo: Array2::zeros((d, d)),
        bo: vec![0.0; d],
        ln2_g: vec![0.0; d],
        ln2_b: vec![0.0; d],
        w1: Array2::zeros((d, f)),
        b1: vec![0.0; f],
        w2: Array2::zeros((f, d)),
        b2: vec![0.0; d],
    }
}

impl ParamSet {
    pub fn zeros(cfg: &ModelConfig) -> ParamSet {
        let d = cfg.d_model;
        ParamSet {
            embed: vec![Array2::zeros((cfg.vocab(), d)); cfg.n_q],
            layers: (0..cfg.n_layers).map(|_| zeros_layer(cfg)).collect(),
            final_ln_g: vec![0.0; d],
            final_ln_b: vec![0.0; d],
            heads: vec![Array2::zeros((d, cfg.vocab())); cfg.n_q],
            head_b: vec![vec![0.0; cfg.vocab()]; cfg.n_q],
            proj: ProjectionParams { weight: Array2::zeros((cfg.d_v, d)), bias: vec![0.0; d] },
            null_cond: vec![0.0; d],
        }
    }

    pub fn entries(&self) -> Vec<TensorRef<'_>> {
        fn mat<'a>(name: String, m: &'a Array2<f64>) -> TensorRef<'a> {
            TensorRef {
                name,
                shape: vec![m.nrows(), m.ncols()],
                data: m.as_slice().expect("standard layout"),
                decay: true,
            }
        }
        fn vecf<'a>(name: String, v: &'a [f64]) -> TensorRef<'a> {
            TensorRef { name, shape: vec![v.len()], data: v, decay: false }
        }
        let mut out = Vec::new();
        for (k, e) in self.embed.iter().enumerate() {
            out.push(mat(format!("embed.{k}"), e));
        }
        for (l, lp) in self.layers.iter().enumerate() {
            out.push(vecf(format!("layer.{l}.ln1.g"), &lp.ln1_g));
            out.push(vecf(format!("layer.{l}.ln1.b"), &lp.ln1_b));
            out.push(mat(format!("layer.{l}.attn.wq"), &lp.wq));
            out.push(vecf(format!("layer.{l}.attn.bq"), &lp.bq));
            out.push(mat(format!("layer.{l}.attn.wk"), &lp.wk));
            out.push(vecf(format!("layer.{l}.attn.bk"), &lp.bk));
            out.push(mat(format!("layer.{l}.attn.wv"), &lp.wv));
            out.push(vecf(format!("layer.{l}.attn.bv"), &lp.bv));
            out.push(mat(format!("layer.{l}.attn.wo"), &lp.wo));
            out.push(vecf(format!("layer.{l}.attn.bo"), &lp.bo));
            out.push(vecf(format!("layer.{l}.ln2.g"), &lp.ln2_g));
            out.push(vecf(format!("layer.{l}.ln2.b"), &lp.ln2_b));
            out.push(mat(format!("layer.{l}.ff.w1"), &lp.w1));
            out.push(vecf(format!("layer.{l}.ff.b1"), &lp.b1));
            out.push(mat(format!("layer.{l}.ff.w2"), &lp.w2));
            out.push(vecf(format!("layer.{l}.ff.b2"), &lp.b2));
        }
        out.push(vecf("final_ln.g".into(), &self.final_ln_g));
        out.push(vecf("final_ln.b".into(), &self.final_ln_b));
        for (k, h) in self.heads.iter().enumerate() {
            out.push(mat(format!("head.{k}.w"), h));
        }
        for (k, b) in self.head_b.iter().enumerate() {
            out.push(vecf(format!("head.{k}.b"), b));
        }
        out.push(mat("proj.weight".into(), &self.proj.weight));
        out.push(vecf("proj.bias".into(), &self.proj.bias));
        out.push(vecf("null_cond".into(), &self.null_cond));
        out
    }

    pub fn entries_mut(&mut self) -> Vec<TensorMut<'_>> {
        fn mat<'a>(name: String, m: &'a mut Array2<f64>) -> TensorMut<'a> {
            TensorMut { name, data: m.as_slice_mut().expect("standard layout"), decay: true }
        }
        fn vecf<'a>(name: String, v: &'a mut [f64]) -> TensorMut<'a> {
            TensorMut { name, data: v, decay: false }
        }
        let mut out = Vec::new();
        for (k, e) in self.embed.iter_mut().enumerate() {
            out.push(mat(format!("embed.{k}"), e));
        }
        for (l, lp) in self.layers.iter_mut().enumerate() {
            out.push(vecf(format!("layer.{l}.ln1.g"), &mut lp.ln1_g));
            out.push(vecf(format!("layer.{l}.ln1.b"), &mut lp.ln1_b));
            out.push(mat(format!("layer.{l}.attn.wq"), &mut lp.wq));
            out.push(vecf(format!("layer.{l}.attn.bq"), &mut lp.bq));
            out.push(mat(format!("layer.{l}.attn.wk"), &mut lp.wk));
            out.push(vecf(format!("layer.{l}.attn.bk"), &mut lp.bk));
            out.push(mat(format!("layer.{l}.attn.wv"), &mut lp.wv));
            out.push(vecf(format!("layer.{l}.attn.bv"), &mut lp.bv));
            out.push(mat(format!("layer.{l}.attn.wo"), &mut lp.wo));
            out.push(vecf(format!("layer.{l}.attn.bo"), &mut lp.bo));
            out.push(vecf(format!("layer.{l}.ln2.g"), &mut lp.ln2_g));
            out.push(vecf(format!("layer.{l}.ln2.b"), &mut lp.ln2_b));
            out.push(mat(format!("layer.{l}.ff.w1"), &mut lp.w1));
            out.push(vecf(format!("layer.{l}.ff.b1"), &mut lp.b1));
            out.push(mat(format!("layer.{l}.ff.w2"), &mut lp.w2));
            out.push(vecf(format!("layer.{l}.ff.b2"), &mut lp.b2));
        }
        out.push(vecf("final_ln.g".into(), &mut self.final_ln_g));
        out.push(vecf("final_ln.b".into(), &mut self.final_ln_b));
        for (k, h) in self.heads.iter_mut().enumerate() {
            out.push(mat(format!("head.{k}.w"), h));
        }
        for (k, b) in self.head_b.iter_mut().enumerate() {
            out.push(vecf(format!("head.{k}.b"), b));
        }
        out.push(mat("proj.weight".into(), &mut self.proj.weight));
        out.push(vecf("proj.bias".into(), &mut self.proj.bias));
        out.push(vecf("null_cond".into(), &mut self.null_cond));
        out
    }

    /// Sum another set into this one (gradient accumulation).
    pub fn add_assign(&mut self, other: &ParamSet) {
        let mut a = self.entries_mut();
        let b = other.entries();
        debug_assert_eq!(a.len(), b.len());
        for (ta, tb) in a.iter_mut().zip(b.iter()) {
            debug_assert_eq!(ta.name, tb.name);
            for (x, y) in ta.data.iter_mut().zip(tb.data.iter()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.entries_mut() {
            for x in t.data {
                *x *= c;
            }
        }
    }
}

/// Standard sinusoidal table: row p, dims (2i, 2i+1) = (sin, cos) of
/// p / 10000^(2i/d).
fn sinusoid_table(rows: usize, d: usize) -> Array2<f64> {
    let mut t = Array2::zeros((rows, d));
    for p in 0..rows {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            t[[p, 2 * i]] = (p as f64 * freq).sin();
            t[[p, 2 * i + 1]] = (p as f64 * freq).cos();
        }
        if d % 2 == 1 {
            let i = d / 2;
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            t[[p, d - 1]] = (p as f64 * freq).sin();
        }
    }
    t
}

const INIT_STD: f64 = 0.02;

impl LMParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<LMParams> {
        cfg.validate()?;
        let mut set = ParamSet::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in set.entries_mut() {
            if t.name.contains("ln") && t.name.ends_with(".g") {
                t.data.fill(1.0);
            } else if t.decay || t.name == "null_cond" {
                // matrices and the learned null row start small random
                for x in t.data {
                    *x = INIT_STD * standard_normal(&mut rng);
                }
            }
            // biases and ln offsets stay zero
        }
        let pos_rows = cfg.max_t.max(cfg.max_s);
        Ok(LMParams { set, pos: sinusoid_table(pos_rows, cfg.d_model), config: cfg.clone() })
    }
}

// ---------------------------------------------------------------------------
// Checkpoint file

/// "FGLM", config block (u32 n_layers, n_heads, d_model, d_ff, n_q,
/// codebook_size, d_v, max_t, max_s; f32 dropout_rate), u32 tensor count,
/// then per tensor: u32 name length, name bytes, u32 ndim, u32 dims, f32
/// payload. Little-endian throughout.
pub fn save_checkpoint(path: &Path, p: &LMParams) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_all(&mut w, b"FGLM")?;
    let c = &p.config;
    for v in [
        c.n_layers, c.n_heads, c.d_model, c.d_ff, c.n_q, c.codebook_size, c.d_v, c.max_t, c.max_s,
    ] {
        write_u32(&mut w, v as u32)?;
    }
    write_f32(&mut w, c.dropout_rate as f32)?;
    let entries = p.set.entries();
    write_u32(&mut w, entries.len() as u32)?;
    for t in &entries {
        write_u32(&mut w, t.name.len() as u32)?;
        write_all(&mut w, t.name.as_bytes())?;
        write_u32(&mut w, t.shape.len() as u32)?;
        for &dim in &t.shape {
            write_u32(&mut w, dim as u32)?;
        }
        let vals: Vec<f32> = t.data.iter().map(|&x| x as f32).collect();
        write_f32s(&mut w, &vals)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LMParams> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    expect_magic(&mut r, b"FGLM", "checkpoint file")?;
    let mut dims = [0usize; 9];
    for (slot, name) in dims.iter_mut().zip([
        "n_layers", "n_heads", "d_model", "d_ff", "n_q", "codebook_size", "d_v", "max_t", "max_s",
    ]) {
        *slot = read_u32(&mut r, name)? as usize;
    }
    let dropout_rate = read_f32(&mut r, "dropout_rate")? as f64;
    let config = ModelConfig {
        n_layers: dims[0],
        n_heads: dims[1],
        d_model: dims[2],
        d_ff: dims[3],
        n_q: dims[4],
        codebook_size: dims[5],
        d_v: dims[6],
        max_t: dims[7],
        max_s: dims[8],
        dropout_rate,
    };
    config.validate()?;
    let n_tensors = read_u32(&mut r, "tensor count")? as usize;

    let mut set = ParamSet::zeros(&config);
    {
        let mut by_name: std::collections::HashMap<String, TensorMut<'_>> =
            set.entries_mut().into_iter().map(|t| (t.name.clone(), t)).collect();
        let expected = by_name.len();
        if n_tensors != expected {
            return Err(Error::Format(format!(
                "checkpoint lists {n_tensors} tensors, model needs {expected}"
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for _ in 0..n_tensors {
            let name_len = read_u32(&mut r, "tensor name length")? as usize;
            if name_len > 256 {
                return Err(Error::Format(format!("tensor name length {name_len} implausible")));
            }
            let mut name_bytes = vec![0u8; name_len];
            crate::util::read_exact_counted(&mut r, &mut name_bytes, "tensor name")?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
            let ndim = read_u32(&mut r, "tensor ndim")? as usize;
            if ndim > 4 {
                return Err(Error::Format(format!("tensor '{name}' has ndim {ndim}")));
            }
            let mut numel = 1usize;
            for _ in 0..ndim {
                numel = numel.saturating_mul(read_u32(&mut r, "tensor dim")? as usize);
            }
            let vals = read_f32s(&mut r, numel, &format!("tensor '{name}'"))?;
            let slot = by_name.get_mut(&name).ok_or_else(|| {
                Error::Format(format!("checkpoint tensor '{name}' unknown to this model"))
            })?;
            if !seen.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate tensor '{name}'")));
            }
            if slot.data.len() != numel {
                return Err(Error::Format(format!(
                    "tensor '{name}': {numel} values for a slot of {}",
                    slot.data.len()
                )));
            }
            for (dst, v) in slot.data.iter_mut().zip(vals) {
                *dst = v as f64;
            }
        }
    }
    expect_eof(&mut r, "checkpoint file")?;
    let pos_rows = config.max_t.max(config.max_s);
    let pos = sinusoid_table(pos_rows, config.d_model);
    Ok(LMParams { set, pos, config })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            n_q: 2,
            codebook_size: 4,
            d_v: 4,
            max_t: 4,
            max_s: 12,
            dropout_rate: 0.0,
        }
    }

    #[test]
    fn vocab_and_reserved_ids() {
        let c = tiny_cfg();
        assert_eq!(c.vocab(), 6);
        assert_eq!(c.pad_id(), 4);
        assert_eq!(c.bos_id(), 5);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_cfg();
        c.n_heads = 3; // 8 % 3 != 0
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.dropout_rate = 1.0;
        assert!(c.validate().is_err());
        assert!(tiny_cfg().validate().is_ok());
    }

    #[test]
    fn init_is_seeded_and_shaped() {
        let p1 = LMParams::init(&tiny_cfg(), 5).unwrap();
        let p2 = LMParams::init(&tiny_cfg(), 5).unwrap();
        let p3 = LMParams::init(&tiny_cfg(), 6).unwrap();
        assert_eq!(p1.set, p2.set);
        assert_ne!(p1.set, p3.set);
        assert_eq!(p1.set.embed[0].dim(), (6, 8));
        assert_eq!(p1.set.heads[1].dim(), (8, 6));
        assert_eq!(p1.set.layers[0].w1.dim(), (8, 16));
        // layer norm gains start at one, biases at zero
        assert!(p1.set.layers[0].ln1_g.iter().all(|&x| x == 1.0));
        assert!(p1.set.layers[0].bq.iter().all(|&x| x == 0.0));
        // weights have the configured scale
        let w = &p1.set.layers[0].wq;
        let rms = (w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64).sqrt();
        assert!(rms > 0.01 && rms < 0.04, "rms {rms}");
    }

    #[test]
    fn entry_lists_align_and_cover() {
        let mut p = LMParams::init(&tiny_cfg(), 0).unwrap();
        let names: Vec<String> = p.set.entries().iter().map(|t| t.name.clone()).collect();
        let names_mut: Vec<String> = p.set.entries_mut().iter().map(|t| t.name.clone()).collect();
        assert_eq!(names, names_mut);
        assert!(names.contains(&"embed.0".to_string()));
        assert!(names.contains(&"layer.0.attn.wq".to_string()));
        assert!(names.contains(&"null_cond".to_string()));
        // no duplicates
        let set: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        // total parameter count matches an independent tally
        let total: usize = p.set.entries().iter().map(|t| t.data.len()).sum();
        let c = tiny_cfg();
        let (d, f, v) = (8usize, 16usize, 6usize);
        let per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        let expect = c.n_q * v * d            // embeddings
            + c.n_layers * per_layer
            + 2 * d                           // final ln
            + c.n_q * (d * v + v)             // heads
            + c.d_v * d + d                   // projection
            + d;                              // null row
        assert_eq!(total, expect);
    }

    #[test]
    fn grad_accumulation_helpers() {
        let cfg = tiny_cfg();
        let mut a = ParamSet::zeros(&cfg);
        let mut b = ParamSet::zeros(&cfg);
        a.embed[0][[0, 0]] = 1.0;
        b.embed[0][[0, 0]] = 2.0;
        b.null_cond[3] = 4.0;
        a.add_assign(&b);
        assert_eq!(a.embed[0][[0, 0]], 3.0);
        assert_eq!(a.null_cond[3], 4.0);
        a.scale(0.5);
        assert_eq!(a.embed[0][[0, 0]], 1.5);
        assert_eq!(a.null_cond[3], 2.0);
    }

    #[test]
    fn sinusoid_table_properties() {
        let t = sinusoid_table(10, 8);
        // row 0: sin 0 / cos 0 interleaved
        for i in 0..4 {
            assert_eq!(t[[0, 2 * i]], 0.0);
            assert_eq!(t[[0, 2 * i + 1]], 1.0);
        }
        // sin^2 + cos^2 = 1 per pair
        for p in 0..10 {
            for i in 0..4 {
                let s = t[[p, 2 * i]];
                let c = t[[p, 2 * i + 1]];
                assert!((s * s + c * c - 1.0).abs() < 1e-12);
            }
        }
        // rows distinct
        assert_ne!(t.row(1).to_vec(), t.row(2).to_vec());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.fglm");
        let p = LMParams::init(&tiny_cfg(), 11).unwrap();
        save_checkpoint(&path, &p).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, p.config);
        // values round through f32
        let orig = p.set.entries();
        let re = back.set.entries();
        for (a, b) in orig.iter().zip(re.iter()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.data.iter().zip(b.data.iter()) {
                assert_eq!(*x as f32, *y as f32);
                assert_eq!(*y, *y as f32 as f64); // loaded values are f32-exact
            }
        }
    }

    #[test]
    fn checkpoint_corruption_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.fglm");
        let p = LMParams::init(&tiny_cfg(), 3).unwrap();
        save_checkpoint(&path, &p).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(load_checkpoint(&path).is_err());

        let mut garbled = bytes.clone();
        garbled[2] = b'X';
        std::fs::write(&path, &garbled).unwrap();
        assert!(load_checkpoint(&path).is_err());

        let mut trailing = bytes.clone();
        trailing.push(0);
        std::fs::write(&path, &trailing).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }
}
