//! Autoregressive generation with classifier-free guidance and top-k
//! sampling, then token -> latent -> waveform decoding.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::featurizer::{defeaturize, FeaturizerConfig};
use crate::lm::{LMParams, StreamState};
use crate::masks::{build_mask, MaskSpec, Mechanism};
use crate::patterns::{is_mandated_pad, remove_delay, StepSequence};
use crate::rvq::{rvq_decode, RVQModel, TokenGrid};
use crate::toy_data::Waveform;
use crate::visual::{project, VisualFeatures};

use ndarray::Array2;

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub cfg_scale: f64,
    pub top_k: usize,
    pub temperature: f64,
    /// Delayed steps to emit; the grid gets max_steps - n_q + 1 frames.
    pub max_steps: usize,
    pub seed: u64,
}

impl GenConfig {
    /// Desk defaults: guidance 3.0, k capped at min(vocab, 32), temperature 1.
    pub fn desk_default(vocab: usize, max_steps: usize, seed: u64) -> GenConfig {
        GenConfig {
            cfg_scale: 3.0,
            top_k: vocab.min(32),
            temperature: 1.0,
            max_steps,
            seed,
        }
    }

    pub fn validate(&self, vocab: usize, n_q: usize) -> Result<()> {
        if !(self.cfg_scale.is_finite() && self.cfg_scale >= 0.0) {
            return Err(Error::Config(format!(
                "cfg_scale must be >= 0, got {}",
                self.cfg_scale
            )));
        }
        if self.top_k == 0 || self.top_k > vocab {
            return Err(Error::Config(format!(
                "top_k {} outside 1..={vocab}",
                self.top_k
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.max_steps < n_q {
            return Err(Error::Config(format!(
                "max_steps {} cannot fit {} delayed streams",
                self.max_steps, n_q
            )));
        }
        Ok(())
    }
}

/// out = l_uncond + scale * (l_cond - l_uncond). Scale 1 short-circuits to
/// the conditional logits so guidance-off runs are bit-identical to a
/// conditional-only sampler.
pub fn cfg_combine(l_cond: &[f64], l_uncond: &[f64], scale: f64) -> Vec<f64> {
    debug_assert_eq!(l_cond.len(), l_uncond.len());
    if scale == 1.0 {
        return l_cond.to_vec();
    }
    l_cond
        .iter()
        .zip(l_uncond)
        .map(|(&c, &u)| u + scale * (c - u))
        .collect()
}

/// Samples from the k highest logits (ties resolved toward the lowest
/// index), softmaxed at `temperature`, via inverse-CDF on `rng`.
pub fn top_k_sample(
    logits: &[f64],
    k: usize,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    if logits.is_empty() || k == 0 {
        return Err(Error::Invalid("top_k_sample needs logits and k >= 1".into()));
    }
    for &v in logits {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite logit {v}")));
        }
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // stable sort: equal values keep ascending index order
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap());
    order.truncate(k.min(logits.len()));

    let max = logits[order[0]];
    let mut probs: Vec<f64> = order
        .iter()
        .map(|&i| ((logits[i] - max) / temperature).exp())
        .collect();
    let sum: f64 = probs.iter().sum();
    if !(sum.is_finite() && sum > 0.0) {
        return Err(Error::Numeric("degenerate sampling distribution".into()));
    }
    for p in &mut probs {
        *p /= sum;
    }
    let u = rng.random::<f64>();
    let mut cum = 0.0;
    for (slot, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return Ok(order[slot]);
        }
    }
    Ok(*order.last().unwrap())
}

/// Generates a token grid and its decoded waveform from visual features.
///
/// Runs conditional and null-condition incremental passes in lockstep, mixes
/// their logits with `cfg_combine`, forces mandated pad slots without
/// consuming randomness, and samples everything else over code ids only
/// (pad/BOS are structural and never sampled).
pub fn generate(
    p: &LMParams,
    rvq: &RVQModel,
    fz: &FeaturizerConfig,
    f: &VisualFeatures,
    g: &GenConfig,
    mechanism: Mechanism,
) -> Result<(TokenGrid, Waveform)> {
    let cfg = &p.config;
    g.validate(cfg.vocab(), cfg.n_q)?;
    if rvq.config.n_q != cfg.n_q || rvq.config.codebook_size != cfg.codebook_size {
        return Err(Error::Shape(format!(
            "codec is {}x{}, model expects {}x{}",
            rvq.config.n_q, rvq.config.codebook_size, cfg.n_q, cfg.codebook_size
        )));
    }
    let steps = generate_steps(p, f, g, mechanism, fz.frame_rate_a())?;
    let grid = remove_delay(&steps, false)?;
    let latents = rvq_decode(rvq, &grid)?;
    let wave = defeaturize(&latents, fz)?;
    Ok((grid, wave))
}

/// Token-level generation loop; exposed separately so callers can score
/// sequences without decoding audio.
pub fn generate_steps(
    p: &LMParams,
    f: &VisualFeatures,
    g: &GenConfig,
    mechanism: Mechanism,
    frame_rate_a: u32,
) -> Result<StepSequence> {
    let cfg = &p.config;
    g.validate(cfg.vocab(), cfg.n_q)?;
    let s_steps = g.max_steps;
    let l_frames = s_steps - cfg.n_q + 1;
    let mask = build_mask(&MaskSpec {
        mechanism,
        t_visual: f.t(),
        s_audio: s_steps,
        frame_rate_a,
        frame_rate_v: f.frame_rate_v,
    })?;

    let cond_rows = project(f, &p.set.proj)?;
    let null_rows =
        Array2::from_shape_fn((f.t(), cfg.d_model), |(_, j)| p.set.null_cond[j]);
    let mut st_c = StreamState::new(p, &mask);
    let mut st_u = StreamState::new(p, &mask);
    st_c.prime(&cond_rows)?;
    st_u.prime(&null_rows)?;

    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let pad = cfg.pad_id();
    let sample_k = g.top_k.min(cfg.codebook_size);
    let mut tuples: Vec<Vec<u16>> = Vec::with_capacity(s_steps);
    for s in 0..s_steps {
        let prev = if s == 0 { None } else { Some(&tuples[s - 1][..]) };
        let lc = st_c.step(prev)?;
        let lu = st_u.step(prev)?;
        let mut tuple = Vec::with_capacity(cfg.n_q);
        for k in 0..cfg.n_q {
            if is_mandated_pad(s, k, l_frames) {
                tuple.push(pad);
                continue;
            }
            let mixed = cfg_combine(&lc[k], &lu[k], g.cfg_scale);
            let idx = top_k_sample(&mixed[..cfg.codebook_size], sample_k, g.temperature, &mut rng)?;
            tuple.push(idx as u16);
        }
        tuples.push(tuple);
    }
    Ok(StepSequence {
        steps: tuples,
        n_q: cfg.n_q,
        codebook_size: cfg.codebook_size,
        frame_rate_a,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ModelConfig;
    use crate::rvq::RVQConfig;
    use ndarray::Array2;

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
            max_s: 16,
            dropout_rate: 0.0,
        }
    }

    fn rand_feats(t: usize, d_v: usize, seed: u64) -> VisualFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = Array2::from_shape_fn((t, d_v), |_| rng.random::<f64>() - 0.5);
        VisualFeatures { feats, frame_rate_v: 1 }
    }

    fn toy_codec(dim: usize) -> RVQModel {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let config = RVQConfig { n_q: 2, codebook_size: 4, ..Default::default() };
        let codebooks: Vec<Array2<f64>> = (0..2)
            .map(|_| Array2::from_shape_fn((4, dim), |_| rng.random::<f64>()))
            .collect();
        RVQModel {
            ema_counts: vec![vec![0.0; 4]; 2],
            ema_sums: codebooks.iter().map(|c| c.clone()).collect(),
            codebooks,
            config,
            dim,
        }
    }

    fn toy_featurizer() -> FeaturizerConfig {
        FeaturizerConfig::for_tones(&[200.0, 400.0, 600.0], 3, 80, 8000).unwrap()
    }

    #[test]
    fn combine_identities() {
        let c = vec![0.3, -1.0, 2.0];
        let u = vec![0.1, 0.5, -0.5];
        // scale 1 is the conditional logits, bit for bit (no rounding detour)
        assert_eq!(cfg_combine(&c, &u, 1.0), c);
        assert_eq!(cfg_combine(&c, &u, 0.0), u);
        let z = vec![0.0; 3];
        let tripled = cfg_combine(&c, &z, 3.0);
        for (t, &cc) in tripled.iter().zip(&c) {
            assert!((t - 3.0 * cc).abs() < 1e-15);
        }
    }

    #[test]
    fn top_k_one_is_argmax_with_low_tie() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = vec![0.1, 0.9, 0.9, 0.3];
        for _ in 0..50 {
            assert_eq!(top_k_sample(&logits, 1, 1.0, &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn near_zero_temperature_concentrates_on_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = vec![0.2, 1.4, 0.9, 1.1, -0.3, 0.0];
        let mut hits = 0;
        for _ in 0..10_000 {
            if top_k_sample(&logits, 6, 1e-3, &mut rng).unwrap() == 1 {
                hits += 1;
            }
        }
        assert!(hits as f64 / 10_000.0 > 0.999, "argmax rate {}", hits);
    }

    #[test]
    fn equal_top_pair_splits_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = vec![2.0, 0.1, 2.0, -1.0];
        let mut first = 0usize;
        for _ in 0..10_000 {
            match top_k_sample(&logits, 2, 1.0, &mut rng).unwrap() {
                0 => first += 1,
                2 => {}
                other => panic!("sampled outside the top pair: {other}"),
            }
        }
        let frac = first as f64 / 10_000.0;
        assert!((frac - 0.5).abs() < 0.03, "split {frac}");
    }

    #[test]
    fn non_finite_logits_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(top_k_sample(&[0.0, f64::NAN], 2, 1.0, &mut rng).is_err());
        assert!(top_k_sample(&[f64::INFINITY, 0.0], 1, 1.0, &mut rng).is_err());
    }

    #[test]
    fn sampling_statistics_match_softmax() {
        // k = len, temp 1: empirical frequencies track the analytic softmax
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits: Vec<f64> = vec![0.0, 1.0, -1.0];
        let exps: Vec<f64> = logits.iter().map(|&l| l.exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut counts = [0usize; 3];
        let n = 20_000;
        for _ in 0..n {
            counts[top_k_sample(&logits, 3, 1.0, &mut rng).unwrap()] += 1;
        }
        for i in 0..3 {
            let emp = counts[i] as f64 / n as f64;
            let exact = exps[i] / z;
            assert!((emp - exact).abs() < 0.02, "class {i}: {emp} vs {exact}");
        }
    }

    #[test]
    fn grid_shape_follows_length_law() {
        let p = LMParams::init(&tiny_cfg(), 100).unwrap();
        let codec = toy_codec(3);
        let fz = toy_featurizer();
        let f = rand_feats(2, 4, 101);
        for max_steps in [2usize, 5, 9] {
            let g = GenConfig::desk_default(6, max_steps, 7);
            let (grid, wave) =
                generate(&p, &codec, &fz, &f, &g, Mechanism::AllFrame).unwrap();
            assert_eq!(grid.codes.len(), 2);
            for stream in &grid.codes {
                assert_eq!(stream.len(), max_steps - 2 + 1);
            }
            assert_eq!(wave.samples.len(), (max_steps - 1) * fz.hop);
        }
    }

    #[test]
    fn pad_discipline_holds_by_construction() {
        let p = LMParams::init(&tiny_cfg(), 102).unwrap();
        let f = rand_feats(3, 4, 103);
        let g = GenConfig { cfg_scale: 2.5, top_k: 4, temperature: 1.3, max_steps: 9, seed: 11 };
        let steps = generate_steps(&p, &f, &g, Mechanism::CausalVisual, 4).unwrap();
        let l = steps.n_frames();
        for (s, tuple) in steps.steps.iter().enumerate() {
            for (k, &tok) in tuple.iter().enumerate() {
                if is_mandated_pad(s, k, l) {
                    assert_eq!(tok, steps.pad_id());
                } else {
                    assert!(tok < 4, "pad or junk in a content slot");
                }
            }
        }
        // strict un-delay accepts it
        assert!(remove_delay(&steps, false).is_ok());
    }

    #[test]
    fn scale_one_equals_conditional_only_sampler() {
        let p = LMParams::init(&tiny_cfg(), 104).unwrap();
        let f = rand_feats(2, 4, 105);
        let g = GenConfig { cfg_scale: 1.0, top_k: 4, temperature: 1.0, max_steps: 7, seed: 21 };
        let guided = generate_steps(&p, &f, &g, Mechanism::AllFrame, 4).unwrap();

        // reference: same loop without the null pass
        let cfg = &p.config;
        let mask = build_mask(&MaskSpec {
            mechanism: Mechanism::AllFrame,
            t_visual: 2,
            s_audio: 7,
            frame_rate_a: 4,
            frame_rate_v: 1,
        })
        .unwrap();
        let cond_rows = project(&f, &p.set.proj).unwrap();
        let mut st = StreamState::new(&p, &mask);
        st.prime(&cond_rows).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut tuples: Vec<Vec<u16>> = Vec::new();
        for s in 0..7 {
            let prev = if s == 0 { None } else { Some(&tuples[s - 1][..]) };
            let lc = st.step(prev).unwrap();
            let mut tuple = Vec::new();
            for k in 0..2 {
                if is_mandated_pad(s, k, 6) {
                    tuple.push(cfg.pad_id());
                } else {
                    let idx = top_k_sample(&lc[k][..4], 4, 1.0, &mut rng).unwrap();
                    tuple.push(idx as u16);
                }
            }
            tuples.push(tuple);
        }
        assert_eq!(guided.steps, tuples);
    }

    #[test]
    fn seed_determinism_and_sensitivity() {
        let p = LMParams::init(&tiny_cfg(), 106).unwrap();
        let codec = toy_codec(3);
        let fz = toy_featurizer();
        let f = rand_feats(2, 4, 107);
        let g = GenConfig::desk_default(6, 9, 42);
        let (grid_a, wave_a) = generate(&p, &codec, &fz, &f, &g, Mechanism::AllFrame).unwrap();
        let (grid_b, wave_b) = generate(&p, &codec, &fz, &f, &g, Mechanism::AllFrame).unwrap();
        assert_eq!(grid_a.codes, grid_b.codes);
        assert_eq!(wave_a.samples, wave_b.samples);

        let g2 = GenConfig { seed: 43, ..g };
        let (grid_c, _) = generate(&p, &codec, &fz, &f, &g2, Mechanism::AllFrame).unwrap();
        assert_ne!(grid_a.codes, grid_c.codes);
    }

    #[test]
    fn scale_zero_ignores_the_visual_condition() {
        let p = LMParams::init(&tiny_cfg(), 108).unwrap();
        let g = GenConfig { cfg_scale: 0.0, top_k: 4, temperature: 1.0, max_steps: 7, seed: 9 };
        let fa = rand_feats(2, 4, 109);
        let fb = rand_feats(2, 4, 110);
        let a = generate_steps(&p, &fa, &g, Mechanism::AllFrame, 4).unwrap();
        let b = generate_steps(&p, &fb, &g, Mechanism::AllFrame, 4).unwrap();
        assert_eq!(a.steps, b.steps);
        // while the mixed logits at any scale > 0 do depend on the features:
        // compare the first-step guidance mix for both feature sets
        let mask = build_mask(&MaskSpec {
            mechanism: Mechanism::AllFrame,
            t_visual: 2,
            s_audio: 7,
            frame_rate_a: 4,
            frame_rate_v: 1,
        })
        .unwrap();
        let null_rows = Array2::from_shape_fn((2, 8), |(_, j)| p.set.null_cond[j]);
        let mut mixes = Vec::new();
        for f in [&fa, &fb] {
            let mut st_c = StreamState::new(&p, &mask);
            st_c.prime(&project(f, &p.set.proj).unwrap()).unwrap();
            let mut st_u = StreamState::new(&p, &mask);
            st_u.prime(&null_rows).unwrap();
            let lc = st_c.step(None).unwrap();
            let lu = st_u.step(None).unwrap();
            mixes.push(cfg_combine(&lc[0], &lu[0], 3.0));
        }
        assert_ne!(mixes[0], mixes[1]);
    }

    #[test]
    fn config_validation_bounds() {
        let ok = GenConfig::desk_default(6, 8, 0);
        assert!(ok.validate(6, 2).is_ok());
        assert_eq!(ok.top_k, 6); // min(vocab, 32)
        assert!(GenConfig { cfg_scale: -0.1, ..ok.clone() }.validate(6, 2).is_err());
        assert!(GenConfig { top_k: 0, ..ok.clone() }.validate(6, 2).is_err());
        assert!(GenConfig { top_k: 7, ..ok.clone() }.validate(6, 2).is_err());
        assert!(GenConfig { temperature: 0.0, ..ok.clone() }.validate(6, 2).is_err());
        assert!(GenConfig { max_steps: 1, ..ok }.validate(6, 2).is_err());
    }
}
