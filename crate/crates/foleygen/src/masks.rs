//! Attention masks over the concatenated [visual prefix | BOS | audio steps]
//! sequence. Three mechanisms differ only in which visual keys an audio query
//! may see: all of them, the causal prefix up to its own frame, or exactly
//! its own frame.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mechanism {
    AllFrame,
    CausalVisual,
    FrameSpecific,
}

impl Mechanism {
    pub const ALL: [Mechanism; 3] =
        [Mechanism::AllFrame, Mechanism::CausalVisual, Mechanism::FrameSpecific];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::AllFrame => "all_frame",
            Mechanism::CausalVisual => "causal_visual",
            Mechanism::FrameSpecific => "frame_specific",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_frame" => Ok(Mechanism::AllFrame),
            "causal_visual" => Ok(Mechanism::CausalVisual),
            "frame_specific" => Ok(Mechanism::FrameSpecific),
            other => Err(Error::Config(format!(
                "unknown attention mechanism '{other}' \
                 (expected all_frame, causal_visual or frame_specific)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSpec {
    pub mechanism: Mechanism,
    /// Visual frames T.
    pub t_visual: usize,
    /// Audio positions S, BOS at index 0 plus the delayed steps.
    pub s_audio: usize,
    pub frame_rate_a: u32,
    pub frame_rate_v: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    /// (T+S) x (T+S), query rows, key columns.
    pub allowed: Vec<Vec<bool>>,
    pub t_visual: usize,
    pub s_audio: usize,
}

impl AttentionMask {
    pub fn n(&self) -> usize {
        self.t_visual + self.s_audio
    }
}

/// Visual frame concurrent with audio position `i` (i=0 is BOS, treated like
/// the first step). The -1 accounts for BOS occupying index 0.
pub fn frame_map(i: usize, frame_rate_a: u32, frame_rate_v: u32, t_visual: usize) -> usize {
    let steps = i.saturating_sub(1) as u64;
    let raw = steps * frame_rate_v as u64 / frame_rate_a as u64;
    (raw as usize).min(t_visual - 1)
}

pub fn build_mask(spec: &MaskSpec) -> Result<AttentionMask> {
    if spec.t_visual == 0 || spec.s_audio == 0 {
        return Err(Error::Invalid(format!(
            "mask needs T >= 1 and S >= 1, got T={} S={}",
            spec.t_visual, spec.s_audio
        )));
    }
    if spec.frame_rate_a == 0 || spec.frame_rate_v == 0 {
        return Err(Error::Invalid("frame rates must be positive".into()));
    }
    let t = spec.t_visual;
    let s = spec.s_audio;
    let n = t + s;
    let mut allowed = vec![vec![false; n]; n];
    // visual queries: causal within the prefix, never into audio
    for (i, row) in allowed.iter_mut().enumerate().take(t) {
        for (j, slot) in row.iter_mut().enumerate().take(t) {
            *slot = j <= i;
        }
    }
    // audio queries
    for a in 0..s {
        let row = &mut allowed[t + a];
        let phi = frame_map(a, spec.frame_rate_a, spec.frame_rate_v, t);
        for (j, slot) in row.iter_mut().enumerate().take(t) {
            *slot = match spec.mechanism {
                Mechanism::AllFrame => true,
                Mechanism::CausalVisual => j <= phi,
                Mechanism::FrameSpecific => j == phi,
            };
        }
        for b in 0..=a {
            row[t + b] = true;
        }
    }
    Ok(AttentionMask { allowed, t_visual: t, s_audio: s })
}

/// `0`/`1` text grid, one query row per line.
pub fn render_grid(mask: &AttentionMask) -> String {
    let mut out = String::with_capacity(mask.n() * (mask.n() + 1));
    for row in &mask.allowed {
        for &bit in row {
            out.push(if bit { '1' } else { '0' });
        }
        out.push('\n');
    }
    out
}
