//! Per-frame visual features and their projection to the decoder dimension.
//!
//! The synthetic encoder exposes exactly what a perfect visual encoder could
//! know: per-class event counts inside each frame and the fractional onset of
//! the earliest event, plus seeded nuisance dims. Externally computed
//! embeddings load from a simple binary format instead.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use crate::error::{Error, Result};
use crate::toy_data::VisualTrack;
use crate::util::{
    expect_eof, expect_magic, read_f32s, read_u32, standard_normal, write_all, write_f32s,
    write_u32,
};

/// Scale of the seeded nuisance dims beyond the informative ones.
const NOISE_SCALE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures {
    /// T x D_v.
    pub feats: Array2<f64>,
    pub frame_rate_v: u32,
}

impl VisualFeatures {
    pub fn t(&self) -> usize {
        self.feats.nrows()
    }

    pub fn d_v(&self) -> usize {
        self.feats.ncols()
    }
}

/// Linear map from visual feature space to the model dimension; trained with
/// the language model.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    /// D_v x D_model.
    pub weight: Array2<f64>,
    pub bias: Vec<f64>,
}

/// T x D_model condition prefix rows.
pub type ConditionSequence = Array2<f64>;

pub fn encode_visual(
    track: &VisualTrack,
    n_classes: usize,
    d_v: usize,
    seed: u64,
) -> Result<VisualFeatures> {
    if d_v < n_classes + 1 {
        return Err(Error::Invalid(format!(
            "d_v={d_v} too small: need n_classes+1={} informative dims",
            n_classes + 1
        )));
    }
    let rate = track.frame_rate_v;
    if rate == 0 || track.duration_s == 0 {
        return Err(Error::Invalid("visual track needs positive duration and rate".into()));
    }
    let t = (track.duration_s * rate) as usize;
    let mut feats = Array2::<f64>::zeros((t, d_v));
    let mut earliest: Vec<Option<f64>> = vec![None; t];
    for ev in &track.events {
        if ev.class_id >= n_classes {
            return Err(Error::Invalid(format!(
                "event class {} out of range for n_classes={n_classes}",
                ev.class_id
            )));
        }
        if ev.onset_s < 0.0 || ev.onset_s >= track.duration_s as f64 {
            return Err(Error::Invalid(format!(
                "event onset {} outside [0, {})",
                ev.onset_s, track.duration_s
            )));
        }
        let f = ((ev.onset_s * rate as f64).floor() as usize).min(t - 1);
        feats[[f, ev.class_id]] += 1.0;
        let frac = ev.onset_s * rate as f64 - f as f64;
        earliest[f] = Some(earliest[f].map_or(frac, |cur: f64| cur.min(frac)));
    }
    for (f, frac) in earliest.into_iter().enumerate() {
        feats[[f, n_classes]] = frac.unwrap_or(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for f in 0..t {
        for j in (n_classes + 1)..d_v {
            feats[[f, j]] = NOISE_SCALE * standard_normal(&mut rng);
        }
    }
    Ok(VisualFeatures { feats, frame_rate_v: rate })
}

/// Embedding file: "VEMB", u32 T, u32 D_v, u32 frame_rate_v, then f32
/// row-major little-endian.
pub fn save_embeddings(path: &Path, f: &VisualFeatures) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_all(&mut w, b"VEMB")?;
    write_u32(&mut w, f.t() as u32)?;
    write_u32(&mut w, f.d_v() as u32)?;
    write_u32(&mut w, f.frame_rate_v)?;
    let vals: Vec<f32> = f.feats.iter().map(|&x| x as f32).collect();
    write_f32s(&mut w, &vals)?;
    Ok(())
}

pub fn load_external_embeddings(path: &Path) -> Result<VisualFeatures> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    expect_magic(&mut r, b"VEMB", "embedding file")?;
    let t = read_u32(&mut r, "T")? as usize;
    let d_v = read_u32(&mut r, "D_v")? as usize;
    let frame_rate_v = read_u32(&mut r, "frame_rate_v")?;
    if t == 0 || d_v == 0 {
        return Err(Error::Format(format!("embedding file with T={t}, D_v={d_v}")));
    }
    if frame_rate_v == 0 {
        return Err(Error::Format("embedding file with frame_rate_v=0".into()));
    }
    let vals = read_f32s(&mut r, t * d_v, "embedding rows")?;
    if let Some(bad) = vals.iter().find(|x| !x.is_finite()) {
        return Err(Error::Format(format!("non-finite embedding entry {bad}")));
    }
    expect_eof(&mut r, "embedding file")?;
    let vals64: Vec<f64> = vals.into_iter().map(f64::from).collect();
    let feats = Array2::from_shape_vec((t, d_v), vals64)
        .map_err(|e| Error::Format(format!("embedding shape: {e}")))?;
    Ok(VisualFeatures { feats, frame_rate_v })
}

pub fn project(f: &VisualFeatures, p: &ProjectionParams) -> Result<ConditionSequence> {
    if p.weight.nrows() != f.d_v() {
        return Err(Error::Shape(format!(
            "projection expects D_v={}, features have {}",
            p.weight.nrows(),
            f.d_v()
        )));
    }
    if p.bias.len() != p.weight.ncols() {
        return Err(Error::Shape(format!(
            "bias length {} does not match D_model={}",
            p.bias.len(),
            p.weight.ncols()
        )));
    }
    let mut out = f.feats.dot(&p.weight);
    for mut row in out.rows_mut() {
        row.iter_mut().zip(&p.bias).for_each(|(x, &b)| *x += b);
    }
    Ok(out)
}
