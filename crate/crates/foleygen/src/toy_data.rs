//! Synthetic paired (visual event track, audio waveform) episodes.
//!
//! Each event is a class id plus an onset on a 10 ms grid; the waveform holds
//! a 0.25 s tone burst per event at the class frequency. Ground truth is exact
//! by construction, which is what makes semantic/temporal evaluation checkable.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::util::mix_seed;
use crate::wav::write_wav;

/// Tone burst length in seconds. Fits inside one visual frame at 1 Hz.
pub const BURST_S: f64 = 0.25;
/// Linear fade-in/out applied to each burst, seconds.
pub const FADE_S: f64 = 0.01;
/// Peak amplitude of a single burst.
pub const BURST_AMP: f64 = 0.5;
/// Onsets are quantized to this grid, seconds.
pub const ONSET_GRID_S: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSpec {
    pub duration_s: u32,
    pub n_classes: usize,
    pub max_events: usize,
    pub sample_rate: u32,
    /// class_id -> fundamental frequency in Hz
    pub tone_table: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub class_id: usize,
    pub onset_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualTrack {
    pub duration_s: u32,
    pub events: Vec<Event>,
    /// Visual frames per second.
    pub frame_rate_v: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl EpisodeSpec {
    /// Desk default: class tones at 400, 600, 800, ... Hz. Multiples of 100 Hz
    /// give whole cycles per 10 ms detector window and per 20 ms codec frame,
    /// so probe energies separate exactly.
    pub fn with_default_tones(
        duration_s: u32,
        n_classes: usize,
        max_events: usize,
        sample_rate: u32,
    ) -> Result<Self> {
        let tone_table = (0..n_classes).map(|c| 400.0 + 200.0 * c as f64).collect();
        let spec = EpisodeSpec { duration_s, n_classes, max_events, sample_rate, tone_table };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.duration_s < 1 {
            return Err(Error::Invalid("duration_s must be >= 1".into()));
        }
        if self.n_classes < 1 {
            return Err(Error::Invalid("n_classes must be >= 1".into()));
        }
        if self.max_events < 1 {
            return Err(Error::Invalid("max_events must be >= 1".into()));
        }
        if self.sample_rate == 0 || self.sample_rate % 100 != 0 {
            return Err(Error::Invalid(format!(
                "sample_rate must be a positive multiple of 100 Hz (10 ms onset grid), got {}",
                self.sample_rate
            )));
        }
        if self.tone_table.len() != self.n_classes {
            return Err(Error::Invalid(format!(
                "tone_table has {} entries for {} classes",
                self.tone_table.len(),
                self.n_classes
            )));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        for (c, &f) in self.tone_table.iter().enumerate() {
            if !(f > 0.0) || f >= nyquist {
                return Err(Error::Invalid(format!(
                    "tone for class {c} is {f} Hz, outside (0, {nyquist})"
                )));
            }
        }
        for i in 0..self.tone_table.len() {
            for j in (i + 1)..self.tone_table.len() {
                if (self.tone_table[i] - self.tone_table[j]).abs() < 1e-9 {
                    return Err(Error::Invalid(format!(
                        "tones for classes {i} and {j} coincide at {} Hz",
                        self.tone_table[i]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s as usize) * (self.sample_rate as usize)
    }
}

impl VisualTrack {
    pub fn from_events(duration_s: u32, mut events: Vec<Event>, frame_rate_v: u32) -> Self {
        sort_events(&mut events);
        VisualTrack { duration_s, events, frame_rate_v }
    }
}

fn sort_events(events: &mut [Event]) {
    events.sort_by(|a, b| {
        a.onset_s
            .partial_cmp(&b.onset_s)
            .unwrap()
            .then(a.class_id.cmp(&b.class_id))
    });
}

/// Renders the deterministic waveform for a list of events: per event a
/// BURST_S tone burst at tone_table[class], amplitude BURST_AMP, linear FADE_S
/// fades, summed; normalized only if the sum would clip.
pub fn render_events(spec: &EpisodeSpec, events: &[Event]) -> Waveform {
    let fs = spec.sample_rate as f64;
    let n = spec.n_samples();
    let burst_len = (BURST_S * fs).round() as usize;
    let fade_len = (FADE_S * fs).round() as usize;
    let mut acc = vec![0.0f64; n];

    for ev in events {
        let f = spec.tone_table[ev.class_id];
        let start = (ev.onset_s * fs).round() as usize;
        for i in 0..burst_len {
            let idx = start + i;
            if idx >= n {
                break;
            }
            let env = if i < fade_len {
                i as f64 / fade_len as f64
            } else if i >= burst_len - fade_len {
                (burst_len - i) as f64 / fade_len as f64
            } else {
                1.0
            };
            let phase = std::f64::consts::TAU * f * (i as f64) / fs;
            acc[idx] += BURST_AMP * env * phase.sin();
        }
    }

    let peak = acc.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    if peak > 1.0 {
        let s = 1.0 / peak;
        for x in &mut acc {
            *x *= s;
        }
    }
    Waveform {
        samples: acc.into_iter().map(|x| x as f32).collect(),
        sample_rate: spec.sample_rate,
    }
}

/// Samples an episode: event count uniform in [1, max_events] (0 events when
/// max_events is forced to 0), classes and onsets uniform on the 10 ms grid.
/// Two bursts of the same class closer than one burst length are rejected and
/// resampled, so every onset stays separately detectable; after repeated
/// rejections the event is dropped rather than emitted malformed.
pub fn synth_episode(spec: &EpisodeSpec, seed: u64) -> Result<(VisualTrack, Waveform)> {
    if spec.duration_s < 1 {
        return Err(Error::Invalid("duration_s must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_events = if spec.max_events == 0 { 0 } else { rng.random_range(1..=spec.max_events) };

    // latest grid index where a full burst still fits
    let max_k = spec.duration_s as usize * 100 - (BURST_S / ONSET_GRID_S).round() as usize;
    let mut events: Vec<Event> = Vec::with_capacity(n_events);
    'place: for _ in 0..n_events {
        for _attempt in 0..1000 {
            let class_id = rng.random_range(0..spec.n_classes);
            let k = rng.random_range(0..=max_k);
            let onset_s = k as f64 / 100.0;
            let clash = events.iter().any(|e| {
                e.class_id == class_id && (e.onset_s - onset_s).abs() <= BURST_S + 1e-9
            });
            if !clash {
                events.push(Event { class_id, onset_s });
                continue 'place;
            }
        }
        break; // grid saturated for every remaining class; emit what we have
    }
    sort_events(&mut events);

    let wave = render_events(spec, &events);
    let track = VisualTrack { duration_s: spec.duration_s, events, frame_rate_v: 1 };
    Ok((track, wave))
}

// ---------------------------------------------------------------------------
// Dataset files

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub split: Split,
    /// Global episode id; train ids are 0..n_train, test ids follow. The ids
    /// seed per-episode randomness, so splits never share an episode.
    pub id: usize,
    pub wav_path: PathBuf,
    pub events_path: PathBuf,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<EpisodeRecord>,
}

impl DatasetManifest {
    pub fn split(&self, s: Split) -> impl Iterator<Item = &EpisodeRecord> {
        self.records.iter().filter(move |r| r.split == s)
    }

    pub fn manifest_path(root: &Path) -> PathBuf {
        root.join("manifest.tsv")
    }
}

pub fn write_events_file(path: &Path, events: &[Event]) -> Result<()> {
    let mut out = String::new();
    for e in events {
        out.push_str(&format!("{}\t{:.2}\n", e.class_id, e.onset_s));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_events_file(path: &Path) -> Result<Vec<Event>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut events = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (c, t) = (parts.next(), parts.next());
        let (Some(c), Some(t)) = (c, t) else {
            return Err(Error::Format(format!(
                "{}:{}: expected class_id<TAB>onset_s",
                path.display(),
                ln + 1
            )));
        };
        let class_id: usize = c.trim().parse().map_err(|_| {
            Error::Format(format!("{}:{}: bad class id {c:?}", path.display(), ln + 1))
        })?;
        let onset_s: f64 = t.trim().parse().map_err(|_| {
            Error::Format(format!("{}:{}: bad onset {t:?}", path.display(), ln + 1))
        })?;
        events.push(Event { class_id, onset_s });
    }
    Ok(events)
}

/// Synthesizes n_train + n_test episodes under `root` (train/ and test/
/// subdirectories), writes WAV + .events sidecars and a manifest.tsv, and
/// returns the manifest with events loaded. Deterministic given (spec, seed).
pub fn make_dataset(
    spec: &EpisodeSpec,
    n_train: usize,
    n_test: usize,
    seed: u64,
    root: &Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    if n_train < 1 || n_test < 1 {
        return Err(Error::Invalid("n_train and n_test must be >= 1".into()));
    }
    for sub in ["train", "test"] {
        fs::create_dir_all(root.join(sub)).map_err(|e| Error::io(root.join(sub), e))?;
    }

    let mut records = Vec::with_capacity(n_train + n_test);
    let mut manifest_text = String::new();
    for (split, count, id_base) in [(Split::Train, n_train, 0), (Split::Test, n_test, n_train)] {
        for i in 0..count {
            let id = id_base + i;
            let (track, wave) = synth_episode(spec, mix_seed(seed, id as u64))?;
            let rel_wav = format!("{}/ep_{id:05}.wav", split.as_str());
            let rel_events = format!("{}/ep_{id:05}.events", split.as_str());
            let wav_path = root.join(&rel_wav);
            let events_path = root.join(&rel_events);
            write_wav(&wav_path, &wave)?;
            write_events_file(&events_path, &track.events)?;
            manifest_text.push_str(&format!("{}\t{rel_wav}\t{rel_events}\n", split.as_str()));
            records.push(EpisodeRecord { split, id, wav_path, events_path, events: track.events });
        }
    }

    let manifest_path = DatasetManifest::manifest_path(root);
    let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    f.write_all(manifest_text.as_bytes())
        .map_err(|e| Error::io(&manifest_path, e))?;
    Ok(DatasetManifest { root: root.to_path_buf(), records })
}

/// Loads a manifest written by make_dataset; paths resolve relative to the
/// manifest's directory, events are read eagerly.
pub fn read_manifest(manifest_path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut records = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(Error::Format(format!(
                "{}:{}: expected split<TAB>wav_path<TAB>events_path",
                manifest_path.display(),
                ln + 1
            )));
        }
        let split = match parts[0] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(Error::Format(format!(
                    "{}:{}: unknown split {other:?}",
                    manifest_path.display(),
                    ln + 1
                )))
            }
        };
        let wav_path = root.join(parts[1]);
        let events_path = root.join(parts[2]);
        let events = read_events_file(&events_path)?;
        let id = records.len(); // manifest line order is id order by construction
        records.push(EpisodeRecord { split, id, wav_path, events_path, events });
    }
    if records.is_empty() {
        return Err(Error::Format(format!("{}: empty manifest", manifest_path.display())));
    }
    Ok(DatasetManifest { root, records })
}
