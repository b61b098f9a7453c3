//! Evaluation metrics: Fréchet distance over episode embeddings, label
//! distribution KLD via a tone-energy classifier, and onset alignment
//! scoring against the ground-truth event track.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::featurizer::{featurize, goertzel_energy, FeaturizerConfig};
use crate::toy_data::{EpisodeSpec, Event, VisualTrack, Waveform};

/// Detector hop/window, seconds; matches the onset grid.
pub const DETECT_HOP_S: f64 = 0.01;
/// Onsets of one class closer than this are merged into the first.
pub const MERGE_S: f64 = 0.05;
/// Matching window for alignment scoring, milliseconds.
pub const DEFAULT_WINDOW_MS: f64 = 100.0;
/// 6 dB in power.
const THRESH_FACTOR: f64 = 3.981_071_705_534_972; // 10^0.6
/// Noise floor is at least this fraction of the loudest window anywhere in
/// the episode, so spectral leakage from other classes stays sub-threshold
/// at any uniform amplitude scale.
const REL_FLOOR: f64 = 0.02;
/// Absolute energy floor; only binds on essentially silent audio.
const ABS_FLOOR_E: f64 = 1e-6;
/// Mean per-window energy below which a class is treated as absent.
const SILENCE_MEAN_E: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedStats {
    pub mean: Vec<f64>,
    /// Unbiased sample covariance, E x E.
    pub cov: Array2<f64>,
    pub n: usize,
}

/// Probability over classes plus a trailing silence bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDist {
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentScore {
    pub precision: f64,
    pub recall: f64,
    pub class_accuracy: f64,
}

/// Per-episode embedding: mean featurizer latent over frames.
pub fn episode_embedding(w: &Waveform, fz: &FeaturizerConfig) -> Result<Vec<f64>> {
    let z = featurize(w, fz)?;
    let (l, d) = z.frames.dim();
    if l == 0 {
        return Err(Error::Invalid("cannot embed an empty latent sequence".into()));
    }
    let mut mean = vec![0.0; d];
    for row in z.frames.rows() {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= l as f64;
    }
    Ok(mean)
}

pub fn embed_stats(vectors: &[Vec<f64>]) -> Result<EmbedStats> {
    let n = vectors.len();
    if n < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 embeddings for covariance, got {n}"
        )));
    }
    let e = vectors[0].len();
    if e == 0 || vectors.iter().any(|v| v.len() != e) {
        return Err(Error::Shape("ragged or empty embedding vectors".into()));
    }
    let mut mean = vec![0.0; e];
    for v in vectors {
        for (m, &x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = Array2::<f64>::zeros((e, e));
    for v in vectors {
        for i in 0..e {
            let di = v[i] - mean[i];
            for j in 0..e {
                cov[[i, j]] += di * (v[j] - mean[j]);
            }
        }
    }
    cov.mapv_inplace(|x| x / (n - 1) as f64);
    Ok(EmbedStats { mean, cov, n })
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    let (r, c) = a.dim();
    DMatrix::from_fn(r, c, |i, j| a[[i, j]])
}

/// Symmetric PSD square root via eigendecomposition. Eigenvalues in
/// [-1e-8, 0) are clamped to zero; anything more negative is an error.
fn sqrtm_psd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = SymmetricEigen::new(m.clone());
    let mut vals = sym.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -1e-8 {
            return Err(Error::Numeric(format!(
                "{what} has negative eigenvalue {v:.3e}, not a covariance"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &sym.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&vals) * q.transpose())
}

/// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)), the Gaussian
/// 2-Wasserstein distance.
pub fn frechet_distance(a: &EmbedStats, b: &EmbedStats) -> Result<f64> {
    let e = a.mean.len();
    if b.mean.len() != e || a.cov.dim() != (e, e) || b.cov.dim() != (e, e) {
        return Err(Error::Shape("embedding stats dimensions differ".into()));
    }
    let dmu: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    let sa = to_dmatrix(&a.cov);
    let sb = to_dmatrix(&b.cov);
    // Tr((Sa Sb)^(1/2)) = Tr((Sa^(1/2) Sb Sa^(1/2))^(1/2)), which is symmetric
    let ra = sqrtm_psd(&sa, "first covariance")?;
    let mut inner = &ra * &sb * &ra;
    let innert = inner.transpose();
    inner = (inner + innert) * 0.5;
    let sym = SymmetricEigen::new(inner);
    let mut tr_sqrt = 0.0;
    for &v in sym.eigenvalues.iter() {
        if v < -1e-8 {
            return Err(Error::Numeric(format!(
                "cross-covariance eigenvalue {v:.3e} below clamp tolerance"
            )));
        }
        tr_sqrt += v.max(0.0).sqrt();
    }
    let val = dmu + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    if val < -1e-9 {
        return Err(Error::Numeric(format!(
            "Fréchet distance came out {val:.3e} < 0; inputs are not covariances"
        )));
    }
    Ok(val.max(0.0))
}

/// Per-class per-window Goertzel energies on the 10 ms detector grid.
fn window_energies(w: &Waveform, spec: &EpisodeSpec) -> Result<Vec<Vec<f64>>> {
    if w.sample_rate != spec.sample_rate {
        return Err(Error::Shape(format!(
            "waveform at {} Hz but episode spec says {} Hz",
            w.sample_rate, spec.sample_rate
        )));
    }
    let win = (spec.sample_rate as f64 * DETECT_HOP_S).round() as usize;
    let n_win = w.samples.len() / win;
    let mut energies = vec![vec![0.0; n_win]; spec.n_classes];
    for (c, &freq) in spec.tone_table.iter().enumerate() {
        for wi in 0..n_win {
            let seg = &w.samples[wi * win..(wi + 1) * win];
            energies[c][wi] = goertzel_energy(seg, w.sample_rate, freq);
        }
    }
    Ok(energies)
}

/// Mass proportional to total per-class tone energy; everything below the
/// silence floor puts all mass on the trailing silence bucket.
pub fn toy_classify(w: &Waveform, spec: &EpisodeSpec) -> Result<LabelDist> {
    let energies = window_energies(w, spec)?;
    let n_win = energies.first().map_or(0, |e| e.len());
    let mut probs = vec![0.0; spec.n_classes + 1];
    let totals: Vec<f64> = energies.iter().map(|e| e.iter().sum()).collect();
    let loudest = totals.iter().cloned().fold(0.0, f64::max);
    if n_win == 0 || loudest / n_win as f64 <= SILENCE_MEAN_E {
        probs[spec.n_classes] = 1.0;
        return Ok(LabelDist { probs });
    }
    let sum: f64 = totals.iter().sum();
    for (c, &t) in totals.iter().enumerate() {
        probs[c] = t / sum;
    }
    Ok(LabelDist { probs })
}

/// KL(p || q) with q smoothed by epsilon = 1e-6 and renormalized; p is used
/// as-is with 0 ln 0 = 0.
pub fn label_kld(p: &LabelDist, q: &LabelDist) -> Result<f64> {
    if p.probs.len() != q.probs.len() {
        return Err(Error::Shape(format!(
            "label distributions have {} vs {} entries",
            p.probs.len(),
            q.probs.len()
        )));
    }
    const EPS: f64 = 1e-6;
    let z: f64 = q.probs.iter().map(|&x| x + EPS).sum();
    let mut kld = 0.0;
    for (&pi, &qi) in p.probs.iter().zip(&q.probs) {
        if pi > 0.0 {
            kld += pi * (pi / ((qi + EPS) / z)).ln();
        }
    }
    Ok(kld)
}

/// Detects (class, onset) events: rising edges of per-class energy 6 dB
/// above the noise floor (the larger of the class's 20th-percentile window
/// energy and a fraction of the episode-wide peak), with onsets of one
/// class merged inside MERGE_S.
pub fn detect_onsets(w: &Waveform, spec: &EpisodeSpec) -> Result<Vec<Event>> {
    let energies = window_energies(w, spec)?;
    let peak = energies
        .iter()
        .flat_map(|e| e.iter().cloned())
        .fold(0.0, f64::max);
    let mut onsets = Vec::new();
    for (c, e) in energies.iter().enumerate() {
        if e.is_empty() {
            continue;
        }
        let mut sorted = e.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p20 = sorted[(sorted.len() - 1) / 5];
        let threshold = p20.max(peak * REL_FLOOR).max(ABS_FLOOR_E) * THRESH_FACTOR;
        let mut last: Option<f64> = None;
        let mut prev_active = false;
        for (wi, &val) in e.iter().enumerate() {
            let active = val > threshold;
            if active && !prev_active {
                let t = wi as f64 * DETECT_HOP_S;
                if last.is_none_or(|l| t - l >= MERGE_S) {
                    onsets.push(Event { class_id: c, onset_s: t });
                    last = Some(t);
                }
            }
            prev_active = active;
        }
    }
    onsets.sort_by(|a, b| {
        a.onset_s
            .partial_cmp(&b.onset_s)
            .unwrap()
            .then(a.class_id.cmp(&b.class_id))
    });
    Ok(onsets)
}

/// Greedy one-to-one onset matching inside `window_ms`, then
/// precision/recall over the match counts and class accuracy over matched
/// pairs. Empty-against-empty scores 1.0 across the board (correct silence).
pub fn alignment_score(
    truth: &VisualTrack,
    w: &Waveform,
    spec: &EpisodeSpec,
    window_ms: f64,
) -> Result<AlignmentScore> {
    if !(window_ms.is_finite() && window_ms > 0.0) {
        return Err(Error::Invalid(format!("window_ms must be positive, got {window_ms}")));
    }
    let detected = detect_onsets(w, spec)?;
    let window_s = window_ms / 1000.0;

    // candidate pairs ordered by time gap, ties by indices for determinism
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for (ti, tev) in truth.events.iter().enumerate() {
        for (di, dev) in detected.iter().enumerate() {
            let gap = (tev.onset_s - dev.onset_s).abs();
            if gap <= window_s {
                cands.push((gap, ti, di));
            }
        }
    }
    cands.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut t_used = vec![false; truth.events.len()];
    let mut d_used = vec![false; detected.len()];
    let mut matched = 0usize;
    let mut correct = 0usize;
    for &(_, ti, di) in &cands {
        if t_used[ti] || d_used[di] {
            continue;
        }
        t_used[ti] = true;
        d_used[di] = true;
        matched += 1;
        if truth.events[ti].class_id == detected[di].class_id {
            correct += 1;
        }
    }

    let n_t = truth.events.len();
    let n_d = detected.len();
    let precision = if n_d == 0 {
        if n_t == 0 { 1.0 } else { 0.0 }
    } else {
        matched as f64 / n_d as f64
    };
    let recall = if n_t == 0 {
        if n_d == 0 { 1.0 } else { 0.0 }
    } else {
        matched as f64 / n_t as f64
    };
    let class_accuracy = if matched > 0 {
        correct as f64 / matched as f64
    } else if n_t == 0 && n_d == 0 {
        1.0
    } else {
        0.0
    };
    Ok(AlignmentScore { precision, recall, class_accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_data::{render_events, synth_episode};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec() -> EpisodeSpec {
        EpisodeSpec::with_default_tones(1, 3, 3, 16_000).unwrap()
    }

    fn stats_1d(mu: f64, var: f64) -> EmbedStats {
        EmbedStats {
            mean: vec![mu],
            cov: Array2::from_shape_fn((1, 1), |_| var),
            n: 2,
        }
    }

    #[test]
    fn embed_stats_basics() {
        let s = embed_stats(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(s.mean, vec![1.0, 2.0]);
        assert!(s.cov.iter().all(|&v| v == 0.0));

        let s = embed_stats(&[vec![-1.0], vec![1.0]]).unwrap();
        assert_eq!(s.mean, vec![0.0]);
        assert!((s.cov[[0, 0]] - 2.0).abs() < 1e-15);

        assert!(embed_stats(&[vec![1.0]]).is_err());
        assert!(embed_stats(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn embed_stats_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<Vec<f64>> =
            (0..40).map(|_| (0..5).map(|_| rng.random::<f64>() * 3.0 - 1.0).collect()).collect();
        let s = embed_stats(&data).unwrap();
        // independent oracle
        let n = data.len();
        for j in 0..5 {
            let mu: f64 = data.iter().map(|v| v[j]).sum::<f64>() / n as f64;
            assert!((s.mean[j] - mu).abs() < 1e-12);
            for k in 0..5 {
                let muk: f64 = data.iter().map(|v| v[k]).sum::<f64>() / n as f64;
                let c: f64 = data
                    .iter()
                    .map(|v| (v[j] - mu) * (v[k] - muk))
                    .sum::<f64>()
                    / (n - 1) as f64;
                assert!((s.cov[[j, k]] - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frechet_analytic_cases() {
        let a = stats_1d(0.0, 1.0);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-9);

        let b = stats_1d(1.0, 1.0);
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-9);

        let c = stats_1d(0.0, 4.0);
        assert!((frechet_distance(&a, &c).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn frechet_symmetry_and_positivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sets: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|_| {
                (0..30)
                    .map(|_| (0..4).map(|_| rng.random::<f64>() * 2.0).collect())
                    .collect()
            })
            .collect();
        let stats: Vec<EmbedStats> = sets.iter().map(|s| embed_stats(s).unwrap()).collect();
        for i in 0..3 {
            for j in 0..3 {
                let dij = frechet_distance(&stats[i], &stats[j]).unwrap();
                let dji = frechet_distance(&stats[j], &stats[i]).unwrap();
                assert!(dij >= 0.0);
                assert!((dij - dji).abs() < 1e-9, "asymmetry {dij} vs {dji}");
                if i == j {
                    assert!(dij < 1e-9);
                } else {
                    assert!(dij > 1e-6, "distinct stats scored {dij}");
                }
            }
        }
    }

    #[test]
    fn frechet_rejects_non_psd() {
        let mut bad = stats_1d(0.0, -1.0);
        assert!(frechet_distance(&bad, &bad).is_err());
        // tiny negative inside the clamp tolerance is accepted
        bad.cov[[0, 0]] = -1e-10;
        let ok = stats_1d(0.0, 0.0);
        assert!(frechet_distance(&bad, &ok).is_ok());
    }

    #[test]
    fn classify_silence_and_pure_tone() {
        let sp = spec();
        let silent = Waveform { samples: vec![0.0; sp.n_samples()], sample_rate: 16_000 };
        let d = toy_classify(&silent, &sp).unwrap();
        assert_eq!(d.probs[3], 1.0);
        assert!(d.probs[..3].iter().all(|&p| p == 0.0));

        let w = render_events(&sp, &[Event { class_id: 0, onset_s: 0.2 }]);
        let d = toy_classify(&w, &sp).unwrap();
        assert!(d.probs[0] > 0.95, "class-0 prob {}", d.probs[0]);
        assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn classify_balanced_mix() {
        let sp = spec();
        let w = render_events(
            &sp,
            &[
                Event { class_id: 0, onset_s: 0.1 },
                Event { class_id: 2, onset_s: 0.5 },
            ],
        );
        let d = toy_classify(&w, &sp).unwrap();
        assert!((d.probs[0] - 0.5).abs() < 0.05, "p0 {}", d.probs[0]);
        assert!((d.probs[2] - 0.5).abs() < 0.05, "p2 {}", d.probs[2]);
    }

    #[test]
    fn kld_identities() {
        let p = LabelDist { probs: vec![0.2, 0.3, 0.5] };
        assert!(label_kld(&p, &p).unwrap().abs() < 1e-9);

        let one_hot = LabelDist { probs: vec![1.0, 0.0] };
        let even = LabelDist { probs: vec![0.5, 0.5] };
        let kld = label_kld(&one_hot, &even).unwrap();
        assert!((kld - 2.0f64.ln()).abs() < 1e-9, "got {kld}");

        let short = LabelDist { probs: vec![1.0] };
        assert!(label_kld(&one_hot, &short).is_err());
    }

    #[test]
    fn kld_non_negative_on_random_simplex_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let draw = |rng: &mut ChaCha8Rng| {
                let mut v: Vec<f64> = (0..4).map(|_| rng.random::<f64>() + 1e-3).collect();
                let s: f64 = v.iter().sum();
                v.iter_mut().for_each(|x| *x /= s);
                LabelDist { probs: v }
            };
            let p = draw(&mut rng);
            let q = draw(&mut rng);
            assert!(label_kld(&p, &q).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn onsets_recovered_from_synthetic_episodes() {
        let sp = spec();
        for seed in 0..10u64 {
            let (track, wave) = synth_episode(&sp, seed).unwrap();
            let found = detect_onsets(&wave, &sp).unwrap();
            assert_eq!(found.len(), track.events.len(), "seed {seed}");
            for (f, t) in found.iter().zip(&track.events) {
                assert_eq!(f.class_id, t.class_id, "seed {seed}");
                assert!(
                    (f.onset_s - t.onset_s).abs() <= 0.02 + 1e-9,
                    "seed {seed}: {} vs {}",
                    f.onset_s,
                    t.onset_s
                );
            }
        }
    }

    #[test]
    fn alignment_self_consistency() {
        let sp = spec();
        for seed in 20..26u64 {
            let (track, wave) = synth_episode(&sp, seed).unwrap();
            let s = alignment_score(&track, &wave, &sp, DEFAULT_WINDOW_MS).unwrap();
            assert_eq!(
                (s.precision, s.recall, s.class_accuracy),
                (1.0, 1.0, 1.0),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn silent_waveform_has_zero_recall() {
        let sp = spec();
        let track = VisualTrack::from_events(
            1,
            vec![Event { class_id: 1, onset_s: 0.3 }],
            1,
        );
        let silent = Waveform { samples: vec![0.0; sp.n_samples()], sample_rate: 16_000 };
        let s = alignment_score(&track, &silent, &sp, DEFAULT_WINDOW_MS).unwrap();
        assert_eq!(s.recall, 0.0);
        assert_eq!(s.class_accuracy, 0.0);
    }

    #[test]
    fn shifted_truth_needs_a_wider_window() {
        let sp = spec();
        let audio_events = [Event { class_id: 0, onset_s: 0.2 }];
        let wave = render_events(&sp, &audio_events);
        let track = VisualTrack::from_events(
            1,
            vec![Event { class_id: 0, onset_s: 0.4 }],
            1,
        );
        let narrow = alignment_score(&track, &wave, &sp, 100.0).unwrap();
        assert_eq!(narrow.recall, 0.0);
        let wide = alignment_score(&track, &wave, &sp, 300.0).unwrap();
        assert_eq!((wide.precision, wide.recall, wide.class_accuracy), (1.0, 1.0, 1.0));
    }

    #[test]
    fn amplitude_scaling_leaves_alignment_unchanged() {
        let sp = spec();
        let (track, wave) = synth_episode(&sp, 33).unwrap();
        let base = alignment_score(&track, &wave, &sp, DEFAULT_WINDOW_MS).unwrap();
        for factor in [0.5f32, 0.7, 1.3, 2.0] {
            let scaled = Waveform {
                samples: wave.samples.iter().map(|&s| s * factor).collect(),
                sample_rate: wave.sample_rate,
            };
            let sc = alignment_score(&track, &scaled, &sp, DEFAULT_WINDOW_MS).unwrap();
            assert_eq!(base, sc, "factor {factor}");
        }
    }

    #[test]
    fn matching_is_one_to_one() {
        let sp = spec();
        // audio has two events; truth lists only the first
        let wave = render_events(
            &sp,
            &[
                Event { class_id: 0, onset_s: 0.3 },
                Event { class_id: 1, onset_s: 0.36 },
            ],
        );
        let track = VisualTrack::from_events(
            1,
            vec![Event { class_id: 0, onset_s: 0.3 }],
            1,
        );
        let s = alignment_score(&track, &wave, &sp, DEFAULT_WINDOW_MS).unwrap();
        assert_eq!(s.recall, 1.0);
        assert!((s.precision - 0.5).abs() < 1e-12);
        // greedy by gap matched the exact-time, same-class detection
        assert_eq!(s.class_accuracy, 1.0);
    }

    #[test]
    fn empty_against_empty_is_perfect() {
        let sp = spec();
        let silent = Waveform { samples: vec![0.0; sp.n_samples()], sample_rate: 16_000 };
        let track = VisualTrack::from_events(1, vec![], 1);
        let s = alignment_score(&track, &silent, &sp, DEFAULT_WINDOW_MS).unwrap();
        assert_eq!((s.precision, s.recall, s.class_accuracy), (1.0, 1.0, 1.0));
    }

    #[test]
    fn episode_embedding_is_frame_mean() {
        let sp = spec();
        let (_, wave) = synth_episode(&sp, 44).unwrap();
        let fz = FeaturizerConfig::for_tones(&sp.tone_table, 4, 320, 16_000).unwrap();
        let emb = episode_embedding(&wave, &fz).unwrap();
        assert_eq!(emb.len(), 4);
        let z = featurize(&wave, &fz).unwrap();
        for j in 0..4 {
            let mu = z.frames.column(j).sum() / z.frames.nrows() as f64;
            assert!((emb[j] - mu).abs() < 1e-12);
        }
        // embeddings respond to content: silence embeds at zero
        let silent = Waveform { samples: vec![0.0; sp.n_samples()], sample_rate: 16_000 };
        let emb0 = episode_embedding(&silent, &fz).unwrap();
        assert!(emb0.iter().all(|&v| v == 0.0));
        assert!(emb.iter().any(|&v| v > 0.01));
    }
}
