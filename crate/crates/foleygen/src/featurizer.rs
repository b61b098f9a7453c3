//! Deterministic tone-bank featurizer standing in for a neural codec's
//! encoder/decoder pair.
//!
//! Analysis: per hop-sized frame, Goertzel energy at each probe frequency,
//! stored as log(1+E). Synthesis: per frame, a sum of sinusoids with amplitude
//! sqrt(exp(latent)-1), phase-continuous across frames. With probe frequencies
//! on whole DFT bins of the frame the probes are exactly orthogonal, so the
//! round trip is a fixed point of featurize.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::toy_data::Waveform;

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturizerConfig {
    /// Samples per latent frame.
    pub hop: usize,
    /// Latent dimensionality = number of probe frequencies.
    pub d: usize,
    pub probe_freqs: Vec<f64>,
    pub sample_rate: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    /// L x d, log1p of per-probe Goertzel energy.
    pub frames: Array2<f64>,
    /// = sample_rate / hop
    pub frame_rate_a: u32,
}

impl FeaturizerConfig {
    /// Builds a config whose probes start at the episode tone table and are
    /// padded with harmonics (2f, 3f, ...) up to `d` entries, skipping
    /// collisions and anything at/above Nyquist.
    pub fn for_tones(tones: &[f64], d: usize, hop: usize, sample_rate: u32) -> Result<Self> {
        let nyquist = sample_rate as f64 / 2.0;
        let mut probes: Vec<f64> = Vec::with_capacity(d);
        let push = |f: f64, probes: &mut Vec<f64>| {
            if f < nyquist && probes.iter().all(|&p| (p - f).abs() > 1e-9) {
                probes.push(f);
            }
        };
        for &f in tones {
            push(f, &mut probes);
        }
        let mut mult = 2.0;
        while probes.len() < d && mult < 64.0 {
            for &f in tones {
                if probes.len() >= d {
                    break;
                }
                push(f * mult, &mut probes);
            }
            mult += 1.0;
        }
        probes.truncate(d);
        if probes.len() < d {
            return Err(Error::Invalid(format!(
                "cannot build {d} distinct probes below Nyquist from {} tones",
                tones.len()
            )));
        }
        let cfg = FeaturizerConfig { hop, d, probe_freqs: probes, sample_rate };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 {
            return Err(Error::Invalid("hop must be positive".into()));
        }
        if self.sample_rate == 0 || self.sample_rate as usize % self.hop != 0 {
            return Err(Error::Invalid(format!(
                "hop {} must divide sample_rate {} (integer frame rate)",
                self.hop, self.sample_rate
            )));
        }
        if self.d == 0 || self.probe_freqs.len() != self.d {
            return Err(Error::Invalid(format!(
                "d={} but {} probe frequencies",
                self.d,
                self.probe_freqs.len()
            )));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        for &f in &self.probe_freqs {
            if !(f > 0.0) || f >= nyquist {
                return Err(Error::Invalid(format!("probe {f} Hz outside (0, {nyquist})")));
            }
        }
        for i in 0..self.d {
            for j in (i + 1)..self.d {
                if (self.probe_freqs[i] - self.probe_freqs[j]).abs() < 1e-9 {
                    return Err(Error::Invalid(format!(
                        "probe frequencies {i} and {j} coincide"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn frame_rate_a(&self) -> u32 {
        self.sample_rate / self.hop as u32
    }
}

/// Goertzel energy of one frequency over a window, normalized by (2/N)^2 so a
/// full-window sinusoid of amplitude A at a whole bin yields exactly A^2.
pub fn goertzel_energy(samples: &[f32], sample_rate: u32, freq: f64) -> f64 {
    let n = samples.len();
    if n == 0 {
        return 0.0;
    }
    let w = std::f64::consts::TAU * freq / sample_rate as f64;
    let coeff = 2.0 * w.cos();
    let (mut q1, mut q2) = (0.0f64, 0.0f64);
    for &x in samples {
        let q0 = coeff * q1 - q2 + x as f64;
        q2 = q1;
        q1 = q0;
    }
    let power = q1 * q1 + q2 * q2 - coeff * q1 * q2; // |X(freq)|^2
    let norm = 2.0 / n as f64;
    power * norm * norm
}

pub fn featurize(w: &Waveform, cfg: &FeaturizerConfig) -> Result<LatentSequence> {
    cfg.validate()?;
    if w.sample_rate != cfg.sample_rate {
        return Err(Error::Shape(format!(
            "waveform at {} Hz but featurizer configured for {} Hz",
            w.sample_rate, cfg.sample_rate
        )));
    }
    if w.samples.is_empty() || w.samples.len() % cfg.hop != 0 {
        return Err(Error::Invalid(format!(
            "waveform length {} is not a positive multiple of hop {}; zero-pad the tail first",
            w.samples.len(),
            cfg.hop
        )));
    }
    let l = w.samples.len() / cfg.hop;
    let mut frames = Array2::zeros((l, cfg.d));
    for (fi, chunk) in w.samples.chunks_exact(cfg.hop).enumerate() {
        for (pi, &freq) in cfg.probe_freqs.iter().enumerate() {
            frames[[fi, pi]] = goertzel_energy(chunk, cfg.sample_rate, freq).ln_1p();
        }
    }
    Ok(LatentSequence { frames, frame_rate_a: cfg.frame_rate_a() })
}

pub fn defeaturize(z: &LatentSequence, cfg: &FeaturizerConfig) -> Result<Waveform> {
    cfg.validate()?;
    let (l, d) = z.frames.dim();
    if d != cfg.d {
        return Err(Error::Shape(format!(
            "latents have d={d} but featurizer expects {}",
            cfg.d
        )));
    }
    let fs = cfg.sample_rate as f64;
    let mut samples = vec![0.0f64; l * cfg.hop];
    let omegas: Vec<f64> = cfg
        .probe_freqs
        .iter()
        .map(|&f| std::f64::consts::TAU * f / fs)
        .collect();
    let mut phases = vec![0.0f64; d];
    for fi in 0..l {
        let amps: Vec<f64> = (0..d)
            .map(|pi| {
                // negative latents cannot come from log1p(energy); clamp
                let v = z.frames[[fi, pi]].max(0.0);
                v.exp_m1().sqrt()
            })
            .collect();
        for s in 0..cfg.hop {
            let mut acc = 0.0;
            for pi in 0..d {
                acc += amps[pi] * (phases[pi] + omegas[pi] * s as f64).sin();
            }
            samples[fi * cfg.hop + s] = acc;
        }
        for pi in 0..d {
            phases[pi] = (phases[pi] + omegas[pi] * cfg.hop as f64) % std::f64::consts::TAU;
        }
    }
    Ok(Waveform {
        samples: samples.into_iter().map(|x| x as f32).collect(),
        sample_rate: cfg.sample_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_data::{render_events, EpisodeSpec, Event};

    fn cfg8k(probes: Vec<f64>) -> FeaturizerConfig {
        FeaturizerConfig { hop: 160, d: probes.len(), probe_freqs: probes, sample_rate: 8000 }
    }

    /// Brute-force single-frequency DFT magnitude squared, same normalization.
    fn dft_energy(samples: &[f32], sample_rate: u32, freq: f64) -> f64 {
        let n = samples.len() as f64;
        let w = std::f64::consts::TAU * freq / sample_rate as f64;
        let (mut re, mut im) = (0.0f64, 0.0f64);
        for (i, &x) in samples.iter().enumerate() {
            re += x as f64 * (w * i as f64).cos();
            im -= x as f64 * (w * i as f64).sin();
        }
        (re * re + im * im) * (2.0 / n) * (2.0 / n)
    }

    #[test]
    fn goertzel_matches_brute_force_dft() {
        // arbitrary (non-bin) frequencies and arbitrary content
        let mut samples = vec![0.0f32; 160];
        for i in 0..160 {
            let t = i as f64 / 8000.0;
            samples[i] = (0.4 * (std::f64::consts::TAU * 437.3 * t).sin()
                + 0.2 * (std::f64::consts::TAU * 1021.7 * t + 0.3).cos()) as f32;
        }
        for freq in [100.0, 437.3, 450.0, 1021.7, 3333.3] {
            let g = goertzel_energy(&samples, 8000, freq);
            let d = dft_energy(&samples, 8000, freq);
            let rel = (g - d).abs() / d.abs().max(1e-12);
            assert!(rel < 1e-9, "freq {freq}: goertzel {g} dft {d}");
        }
    }

    #[test]
    fn bin_aligned_tone_recovers_amplitude_squared() {
        // 400 Hz = 8 whole cycles in a 160-sample window at 8 kHz
        let a = 0.37;
        let samples: Vec<f32> = (0..160)
            .map(|i| (a * (std::f64::consts::TAU * 400.0 * i as f64 / 8000.0).sin()) as f32)
            .collect();
        let e = goertzel_energy(&samples, 8000, 400.0);
        assert!((e - a * a).abs() < 1e-7, "e={e}");
        // orthogonal probe sees nothing
        let leak = goertzel_energy(&samples, 8000, 600.0);
        assert!(leak < 1e-9, "leak={leak}");
    }

    #[test]
    fn silent_waveform_gives_zero_latents() {
        let w = Waveform { samples: vec![0.0; 1600], sample_rate: 8000 };
        let z = featurize(&w, &cfg8k(vec![400.0, 800.0])).unwrap();
        assert_eq!(z.frames.dim(), (10, 2));
        assert!(z.frames.iter().all(|&x| x == 0.0));
        assert_eq!(z.frame_rate_a, 50);
    }

    #[test]
    fn frame_count_law() {
        let w = Waveform { samples: vec![0.0; 16000], sample_rate: 8000 };
        let z = featurize(&w, &cfg8k(vec![400.0])).unwrap();
        assert_eq!(z.frames.nrows(), 100);
    }

    #[test]
    fn tone_energy_dominates_harmonic_probe() {
        // 440 Hz content, probes [440, 880]: column 0 >> column 1, every frame
        let samples: Vec<f32> = (0..8000)
            .map(|i| (0.5 * (std::f64::consts::TAU * 440.0 * i as f64 / 8000.0).sin()) as f32)
            .collect();
        let w = Waveform { samples, sample_rate: 8000 };
        let z = featurize(&w, &cfg8k(vec![440.0, 880.0])).unwrap();
        for fi in 0..z.frames.nrows() {
            let ratio = z.frames[[fi, 0]] / z.frames[[fi, 1]].max(1e-12);
            assert!(ratio > 10.0, "frame {fi}: ratio {ratio}");
        }
    }

    #[test]
    fn non_divisible_length_suggests_padding() {
        let w = Waveform { samples: vec![0.0; 161], sample_rate: 8000 };
        let err = featurize(&w, &cfg8k(vec![400.0])).unwrap_err();
        assert!(err.to_string().contains("zero-pad"), "{err}");
    }

    #[test]
    fn defeaturize_recovers_amplitude_and_length() {
        let cfg = cfg8k(vec![400.0, 600.0]);
        let a = 0.25;
        let mut frames = Array2::zeros((5, 2));
        for fi in 0..5 {
            frames[[fi, 0]] = (a * a + 1.0f64).ln(); // amplitude a at probe 0
        }
        let z = LatentSequence { frames, frame_rate_a: 50 };
        let w = defeaturize(&z, &cfg).unwrap();
        assert_eq!(w.samples.len(), 5 * 160);
        let peak = w.samples.iter().fold(0.0f32, |m, &x| m.max(x.abs()));
        assert!((peak as f64 - a).abs() < 1e-3, "peak {peak}");
        // featurize sees the same latents again; f32 sample storage caps the
        // attainable precision around 1e-7 relative
        let z2 = featurize(&w, &cfg).unwrap();
        for fi in 0..5 {
            assert!((z2.frames[[fi, 0]] - z.frames[[fi, 0]]).abs() < 1e-6);
            assert!(z2.frames[[fi, 1]].abs() < 1e-6);
        }
    }

    #[test]
    fn all_zero_latents_decode_to_silence() {
        let cfg = cfg8k(vec![400.0]);
        let z = LatentSequence { frames: Array2::zeros((3, 1)), frame_rate_a: 50 };
        let w = defeaturize(&z, &cfg).unwrap();
        assert!(w.samples.iter().all(|&x| x == 0.0));
        assert_eq!(w.samples.len(), 480);
    }

    #[test]
    fn episode_roundtrip_is_a_fixed_point() {
        // featurize . defeaturize . featurize == featurize within 15% per
        // entry (|a-b| <= 0.15*max(|a|,|b|) + 1e-6 to keep near-zero entries
        // meaningful)
        let spec = EpisodeSpec::with_default_tones(2, 4, 2, 8000).unwrap();
        let events = [
            Event { class_id: 0, onset_s: 0.13 },
            Event { class_id: 2, onset_s: 0.9 },
            Event { class_id: 1, onset_s: 1.55 },
        ];
        let w = render_events(&spec, &events);
        let cfg = FeaturizerConfig::for_tones(&spec.tone_table, 8, 160, 8000).unwrap();
        let z1 = featurize(&w, &cfg).unwrap();
        let w2 = defeaturize(&z1, &cfg).unwrap();
        let z2 = featurize(&w2, &cfg).unwrap();
        assert_eq!(z1.frames.dim(), z2.frames.dim());
        for (a, b) in z1.frames.iter().zip(z2.frames.iter()) {
            let tol = 0.15 * a.abs().max(b.abs()) + 1e-6;
            assert!((a - b).abs() <= tol, "a={a} b={b}");
        }
    }

    #[test]
    fn probe_padding_uses_harmonics() {
        let cfg = FeaturizerConfig::for_tones(&[400.0, 600.0], 5, 160, 8000).unwrap();
        assert_eq!(cfg.probe_freqs, vec![400.0, 600.0, 800.0, 1200.0, 1800.0]);
        // harmonic collision skipped: 2*400 = 800 already present
        let cfg = FeaturizerConfig::for_tones(&[400.0, 800.0], 4, 160, 8000).unwrap();
        assert_eq!(cfg.probe_freqs, vec![400.0, 800.0, 1600.0, 1200.0]);
    }
}
