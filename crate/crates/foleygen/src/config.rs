//! Run configuration: one flat `key = value` text file drives every stage.
//!
//! Unknown keys are rejected, every stage seed must be written out
//! explicitly, and `FOLEYGEN_SEED` (or `--set key=value` pairs) can override
//! the file. Section dots are naming convention only; there is no nesting.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::featurizer::FeaturizerConfig;
use crate::infer::GenConfig;
use crate::lm::{ModelConfig, TrainConfig};
use crate::masks::Mechanism;
use crate::rvq::RVQConfig;
use crate::toy_data::EpisodeSpec;
use crate::util::mix_seed;

pub const SEED_ENV: &str = "FOLEYGEN_SEED";
const SEED_KEYS: [&str; 5] =
    ["data.seed", "codec.seed", "visual.seed", "train.seed", "gen.seed"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub out_dir: PathBuf,

    pub data_duration_s: u32,
    pub data_n_classes: usize,
    pub data_max_events: usize,
    pub data_sample_rate: u32,
    pub data_n_train: usize,
    pub data_n_test: usize,
    pub data_seed: u64,

    pub featurizer_d: usize,
    pub featurizer_hop: usize,

    pub codec_n_q: usize,
    pub codec_codebook_size: usize,
    pub codec_ema_decay: f64,
    pub codec_reseed_threshold: f64,
    pub codec_kmeans_iters: usize,
    pub codec_seed: u64,

    pub visual_d_v: usize,
    pub visual_frame_rate: u32,
    pub visual_seed: u64,

    pub lm_n_layers: usize,
    pub lm_n_heads: usize,
    pub lm_d_model: usize,
    pub lm_d_ff: usize,
    pub lm_dropout_rate: f64,
    pub lm_mechanism: Mechanism,

    pub train_lr: f64,
    pub train_warmup_steps: usize,
    pub train_total_steps: usize,
    pub train_batch_size: usize,
    pub train_weight_decay: f64,
    pub train_beta1: f64,
    pub train_beta2: f64,
    pub train_cond_dropout_p: f64,
    pub train_log_every: usize,
    pub train_seed: u64,

    pub gen_cfg_scale: f64,
    pub gen_top_k: usize,
    pub gen_temperature: f64,
    pub gen_n_episodes: usize,
    pub gen_seed: u64,

    pub eval_window_ms: f64,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            out_dir: PathBuf::from("runs/desk"),
            data_duration_s: 2,
            data_n_classes: 3,
            data_max_events: 3,
            data_sample_rate: 16_000,
            data_n_train: 2000,
            data_n_test: 100,
            data_seed: 0,
            featurizer_d: 8,
            featurizer_hop: 640,
            codec_n_q: 4,
            codec_codebook_size: 64,
            codec_ema_decay: 0.99,
            codec_reseed_threshold: 2.0,
            codec_kmeans_iters: 10,
            codec_seed: 0,
            visual_d_v: 8,
            visual_frame_rate: 5,
            visual_seed: 0,
            lm_n_layers: 4,
            lm_n_heads: 4,
            lm_d_model: 128,
            lm_d_ff: 512,
            lm_dropout_rate: 0.0,
            lm_mechanism: Mechanism::AllFrame,
            train_lr: 3e-4,
            train_warmup_steps: 500,
            train_total_steps: 5000,
            train_batch_size: 8,
            train_weight_decay: 0.1,
            train_beta1: 0.9,
            train_beta2: 0.95,
            train_cond_dropout_p: 0.1,
            train_log_every: 100,
            train_seed: 0,
            gen_cfg_scale: 3.0,
            gen_top_k: 32,
            gen_temperature: 1.0,
            gen_n_episodes: 100,
            gen_seed: 0,
            eval_window_ms: 250.0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse::<T>()
        .map_err(|_| Error::Config(format!("bad value for {key}: {raw:?}")))
}

impl RunConfig {
    /// Applies one `key = value` assignment; unknown keys are errors.
    fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let v = raw.trim();
        match key {
            "out_dir" => self.out_dir = PathBuf::from(v),
            "data.duration_s" => self.data_duration_s = parse_num(key, v)?,
            "data.n_classes" => self.data_n_classes = parse_num(key, v)?,
            "data.max_events" => self.data_max_events = parse_num(key, v)?,
            "data.sample_rate" => self.data_sample_rate = parse_num(key, v)?,
            "data.n_train" => self.data_n_train = parse_num(key, v)?,
            "data.n_test" => self.data_n_test = parse_num(key, v)?,
            "data.seed" => self.data_seed = parse_num(key, v)?,
            "featurizer.d" => self.featurizer_d = parse_num(key, v)?,
            "featurizer.hop" => self.featurizer_hop = parse_num(key, v)?,
            "codec.n_q" => self.codec_n_q = parse_num(key, v)?,
            "codec.codebook_size" => self.codec_codebook_size = parse_num(key, v)?,
            "codec.ema_decay" => self.codec_ema_decay = parse_num(key, v)?,
            "codec.reseed_threshold" => self.codec_reseed_threshold = parse_num(key, v)?,
            "codec.kmeans_iters" => self.codec_kmeans_iters = parse_num(key, v)?,
            "codec.seed" => self.codec_seed = parse_num(key, v)?,
            "visual.d_v" => self.visual_d_v = parse_num(key, v)?,
            "visual.frame_rate" => self.visual_frame_rate = parse_num(key, v)?,
            "visual.seed" => self.visual_seed = parse_num(key, v)?,
            "lm.n_layers" => self.lm_n_layers = parse_num(key, v)?,
            "lm.n_heads" => self.lm_n_heads = parse_num(key, v)?,
            "lm.d_model" => self.lm_d_model = parse_num(key, v)?,
            "lm.d_ff" => self.lm_d_ff = parse_num(key, v)?,
            "lm.dropout_rate" => self.lm_dropout_rate = parse_num(key, v)?,
            "lm.mechanism" => self.lm_mechanism = v.parse()?,
            "train.lr" => self.train_lr = parse_num(key, v)?,
            "train.warmup_steps" => self.train_warmup_steps = parse_num(key, v)?,
            "train.total_steps" => self.train_total_steps = parse_num(key, v)?,
            "train.batch_size" => self.train_batch_size = parse_num(key, v)?,
            "train.weight_decay" => self.train_weight_decay = parse_num(key, v)?,
            "train.beta1" => self.train_beta1 = parse_num(key, v)?,
            "train.beta2" => self.train_beta2 = parse_num(key, v)?,
            "train.cond_dropout_p" => self.train_cond_dropout_p = parse_num(key, v)?,
            "train.log_every" => self.train_log_every = parse_num(key, v)?,
            "train.seed" => self.train_seed = parse_num(key, v)?,
            "gen.cfg_scale" => self.gen_cfg_scale = parse_num(key, v)?,
            "gen.top_k" => self.gen_top_k = parse_num(key, v)?,
            "gen.temperature" => self.gen_temperature = parse_num(key, v)?,
            "gen.n_episodes" => self.gen_n_episodes = parse_num(key, v)?,
            "gen.seed" => self.gen_seed = parse_num(key, v)?,
            "eval.window_ms" => self.eval_window_ms = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses config text. Every seed key must be present: seeds are never
    /// implicit.
    pub fn from_text(text: &str, origin: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{origin}:{}: expected key = value, got {line:?}",
                    ln + 1
                )));
            };
            let key = key.trim();
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!(
                    "{origin}:{}: duplicate key {key:?}",
                    ln + 1
                )));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", ln + 1)))?;
            seen.push(key.to_string());
        }
        for need in SEED_KEYS {
            if !seen.iter().any(|k| k == need) {
                return Err(Error::Config(format!(
                    "{origin}: seed key {need:?} must be set explicitly"
                )));
            }
        }
        Ok(cfg)
    }

    /// Loads a file, applies `--set key=value` overrides in order, then the
    /// FOLEYGEN_SEED environment override, then validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::from_text(&text, &path.display().to_string())?;
        for ov in overrides {
            let Some((key, value)) = ov.split_once('=') else {
                return Err(Error::Config(format!(
                    "--set expects key=value, got {ov:?}"
                )));
            };
            cfg.set(key.trim(), value)?;
        }
        if let Ok(raw) = std::env::var(SEED_ENV) {
            let master: u64 = raw
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be a u64, got {raw:?}")))?;
            cfg.apply_master_seed(master);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Derives all five stage seeds from one master seed (decorrelated).
    pub fn apply_master_seed(&mut self, master: u64) {
        self.data_seed = mix_seed(master, 0);
        self.codec_seed = mix_seed(master, 1);
        self.visual_seed = mix_seed(master, 2);
        self.train_seed = mix_seed(master, 3);
        self.gen_seed = mix_seed(master, 4);
    }

    pub fn validate(&self) -> Result<()> {
        self.episode_spec()?;
        self.featurizer()?;
        self.rvq_config().validate()?;
        self.model_config().validate()?;
        self.train_config().validate()?;
        self.gen_config(self.gen_cfg_scale)
            .validate(self.model_config().vocab(), self.codec_n_q)?;
        if self.visual_d_v < self.data_n_classes + 1 {
            return Err(Error::Config(format!(
                "visual.d_v = {} too small for {} classes (needs n_classes+1)",
                self.visual_d_v, self.data_n_classes
            )));
        }
        if self.visual_frame_rate == 0 {
            return Err(Error::Config("visual.frame_rate must be >= 1".into()));
        }
        if self.gen_n_episodes == 0 {
            return Err(Error::Config("gen.n_episodes must be >= 1".into()));
        }
        if !(self.eval_window_ms.is_finite() && self.eval_window_ms > 0.0) {
            return Err(Error::Config(format!(
                "eval.window_ms must be positive, got {}",
                self.eval_window_ms
            )));
        }
        if self.train_log_every == 0 {
            return Err(Error::Config("train.log_every must be >= 1".into()));
        }
        Ok(())
    }

    // ---- derived module configs -------------------------------------------

    pub fn episode_spec(&self) -> Result<EpisodeSpec> {
        EpisodeSpec::with_default_tones(
            self.data_duration_s,
            self.data_n_classes,
            self.data_max_events,
            self.data_sample_rate,
        )
    }

    pub fn featurizer(&self) -> Result<FeaturizerConfig> {
        let spec = self.episode_spec()?;
        FeaturizerConfig::for_tones(
            &spec.tone_table,
            self.featurizer_d,
            self.featurizer_hop,
            self.data_sample_rate,
        )
    }

    pub fn rvq_config(&self) -> RVQConfig {
        RVQConfig {
            n_q: self.codec_n_q,
            codebook_size: self.codec_codebook_size,
            ema_decay: self.codec_ema_decay,
            reseed_threshold: self.codec_reseed_threshold,
            kmeans_iters: self.codec_kmeans_iters,
        }
    }

    /// Latent frames per episode.
    pub fn l_frames(&self) -> usize {
        self.data_duration_s as usize * (self.data_sample_rate as usize / self.featurizer_hop)
    }

    /// Delayed steps per episode (audio block length minus BOS).
    pub fn s_steps(&self) -> usize {
        self.l_frames() + self.codec_n_q - 1
    }

    /// Visual frames per episode.
    pub fn t_frames(&self) -> usize {
        self.data_duration_s as usize * self.visual_frame_rate as usize
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.lm_n_layers,
            n_heads: self.lm_n_heads,
            d_model: self.lm_d_model,
            d_ff: self.lm_d_ff,
            n_q: self.codec_n_q,
            codebook_size: self.codec_codebook_size,
            d_v: self.visual_d_v,
            max_t: self.t_frames(),
            max_s: self.s_steps() + 1,
            dropout_rate: self.lm_dropout_rate,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train_lr,
            warmup_steps: self.train_warmup_steps,
            total_steps: self.train_total_steps,
            betas: (self.train_beta1, self.train_beta2),
            weight_decay: self.train_weight_decay,
            batch_size: self.train_batch_size,
            cond_dropout_p: self.train_cond_dropout_p,
            seed: self.train_seed,
        }
    }

    pub fn gen_config(&self, cfg_scale: f64) -> GenConfig {
        GenConfig {
            cfg_scale,
            top_k: self.gen_top_k,
            temperature: self.gen_temperature,
            max_steps: self.s_steps(),
            seed: self.gen_seed,
        }
    }

    // ---- artifact layout ---------------------------------------------------

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn codec_path(&self) -> PathBuf {
        self.out_dir.join("codec.rvqm")
    }

    pub fn checkpoint_path(&self, mechanism: Mechanism) -> PathBuf {
        self.out_dir.join(format!("lm_{mechanism}.fglm"))
    }

    pub fn gen_dir(&self, mechanism: Mechanism) -> PathBuf {
        self.out_dir.join(format!("gen_{mechanism}"))
    }

    pub fn eval_report_path(&self, mechanism: Mechanism) -> PathBuf {
        self.out_dir.join(format!("eval_{mechanism}.txt"))
    }

    pub fn eval_kv_path(&self, mechanism: Mechanism) -> PathBuf {
        self.out_dir.join(format!("eval_{mechanism}.kv"))
    }

    pub fn compare_report_path(&self) -> PathBuf {
        self.out_dir.join("compare_attention.txt")
    }

    // ---- stage fingerprints (idempotent reruns) ----------------------------

    pub fn fp_data(&self) -> String {
        format!(
            "data v1 dur={} classes={} maxev={} sr={} ntrain={} ntest={} seed={}",
            self.data_duration_s,
            self.data_n_classes,
            self.data_max_events,
            self.data_sample_rate,
            self.data_n_train,
            self.data_n_test,
            self.data_seed
        )
    }

    pub fn fp_codec(&self) -> String {
        format!(
            "codec v1 nq={} cs={} decay={} reseed={} km={} seed={} fzd={} hop={} | {}",
            self.codec_n_q,
            self.codec_codebook_size,
            self.codec_ema_decay,
            self.codec_reseed_threshold,
            self.codec_kmeans_iters,
            self.codec_seed,
            self.featurizer_d,
            self.featurizer_hop,
            self.fp_data()
        )
    }

    pub fn fp_lm(&self, mechanism: Mechanism) -> String {
        format!(
            "lm v1 mech={mechanism} layers={} heads={} d={} ff={} drop={} dv={} vfr={} vseed={} \
             lr={} warm={} steps={} bs={} wd={} b1={} b2={} cdp={} seed={} | {}",
            self.lm_n_layers,
            self.lm_n_heads,
            self.lm_d_model,
            self.lm_d_ff,
            self.lm_dropout_rate,
            self.visual_d_v,
            self.visual_frame_rate,
            self.visual_seed,
            self.train_lr,
            self.train_warmup_steps,
            self.train_total_steps,
            self.train_batch_size,
            self.train_weight_decay,
            self.train_beta1,
            self.train_beta2,
            self.train_cond_dropout_p,
            self.train_seed,
            self.fp_codec()
        )
    }

    pub fn fp_gen(&self, mechanism: Mechanism) -> String {
        format!(
            "gen v1 scale={} k={} temp={} n={} seed={} | {}",
            self.gen_cfg_scale,
            self.gen_top_k,
            self.gen_temperature,
            self.gen_n_episodes,
            self.gen_seed,
            self.fp_lm(mechanism)
        )
    }

    pub fn fp_eval(&self, mechanism: Mechanism) -> String {
        format!("eval v1 window={} | {}", self.eval_window_ms, self.fp_gen(mechanism))
    }

    /// Renders the full effective configuration as config-file text.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "data.duration_s = {}", self.data_duration_s);
        let _ = writeln!(s, "data.n_classes = {}", self.data_n_classes);
        let _ = writeln!(s, "data.max_events = {}", self.data_max_events);
        let _ = writeln!(s, "data.sample_rate = {}", self.data_sample_rate);
        let _ = writeln!(s, "data.n_train = {}", self.data_n_train);
        let _ = writeln!(s, "data.n_test = {}", self.data_n_test);
        let _ = writeln!(s, "data.seed = {}", self.data_seed);
        let _ = writeln!(s, "featurizer.d = {}", self.featurizer_d);
        let _ = writeln!(s, "featurizer.hop = {}", self.featurizer_hop);
        let _ = writeln!(s, "codec.n_q = {}", self.codec_n_q);
        let _ = writeln!(s, "codec.codebook_size = {}", self.codec_codebook_size);
        let _ = writeln!(s, "codec.ema_decay = {}", self.codec_ema_decay);
        let _ = writeln!(s, "codec.reseed_threshold = {}", self.codec_reseed_threshold);
        let _ = writeln!(s, "codec.kmeans_iters = {}", self.codec_kmeans_iters);
        let _ = writeln!(s, "codec.seed = {}", self.codec_seed);
        let _ = writeln!(s, "visual.d_v = {}", self.visual_d_v);
        let _ = writeln!(s, "visual.frame_rate = {}", self.visual_frame_rate);
        let _ = writeln!(s, "visual.seed = {}", self.visual_seed);
        let _ = writeln!(s, "lm.n_layers = {}", self.lm_n_layers);
        let _ = writeln!(s, "lm.n_heads = {}", self.lm_n_heads);
        let _ = writeln!(s, "lm.d_model = {}", self.lm_d_model);
        let _ = writeln!(s, "lm.d_ff = {}", self.lm_d_ff);
        let _ = writeln!(s, "lm.dropout_rate = {}", self.lm_dropout_rate);
        let _ = writeln!(s, "lm.mechanism = {}", self.lm_mechanism);
        let _ = writeln!(s, "train.lr = {}", self.train_lr);
        let _ = writeln!(s, "train.warmup_steps = {}", self.train_warmup_steps);
        let _ = writeln!(s, "train.total_steps = {}", self.train_total_steps);
        let _ = writeln!(s, "train.batch_size = {}", self.train_batch_size);
        let _ = writeln!(s, "train.weight_decay = {}", self.train_weight_decay);
        let _ = writeln!(s, "train.beta1 = {}", self.train_beta1);
        let _ = writeln!(s, "train.beta2 = {}", self.train_beta2);
        let _ = writeln!(s, "train.cond_dropout_p = {}", self.train_cond_dropout_p);
        let _ = writeln!(s, "train.log_every = {}", self.train_log_every);
        let _ = writeln!(s, "train.seed = {}", self.train_seed);
        let _ = writeln!(s, "gen.cfg_scale = {}", self.gen_cfg_scale);
        let _ = writeln!(s, "gen.top_k = {}", self.gen_top_k);
        let _ = writeln!(s, "gen.temperature = {}", self.gen_temperature);
        let _ = writeln!(s, "gen.n_episodes = {}", self.gen_n_episodes);
        let _ = writeln!(s, "gen.seed = {}", self.gen_seed);
        let _ = writeln!(s, "eval.window_ms = {}", self.eval_window_ms);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> String {
        "data.seed = 1\ncodec.seed = 2\nvisual.seed = 3\ntrain.seed = 4\ngen.seed = 5\n"
            .to_string()
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = RunConfig::from_text(&minimal(), "test").unwrap();
        assert_eq!(cfg.data_seed, 1);
        assert_eq!(cfg.gen_seed, 5);
        assert_eq!(cfg.lm_d_model, 128);
        assert_eq!(cfg.lm_mechanism, Mechanism::AllFrame);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_key_rejected() {
        let text = minimal() + "data.n_trian = 10\n";
        let err = RunConfig::from_text(&text, "test").unwrap_err();
        assert!(err.to_string().contains("n_trian"), "{err}");
    }

    #[test]
    fn missing_seed_rejected() {
        let text = "data.seed = 1\ncodec.seed = 2\nvisual.seed = 3\ntrain.seed = 4\n";
        let err = RunConfig::from_text(text, "test").unwrap_err();
        assert!(err.to_string().contains("gen.seed"), "{err}");
    }

    #[test]
    fn comments_blanks_and_values() {
        let text = minimal()
            + "# a comment\n\nlm.mechanism = frame_specific  # trailing\n  train.lr = 1e-3\n";
        let cfg = RunConfig::from_text(&text, "test").unwrap();
        assert_eq!(cfg.lm_mechanism, Mechanism::FrameSpecific);
        assert_eq!(cfg.train_lr, 1e-3);
    }

    #[test]
    fn duplicate_and_malformed_lines_rejected() {
        let text = minimal() + "train.lr = 1\ntrain.lr = 2\n";
        assert!(RunConfig::from_text(&text, "test").is_err());
        let text = minimal() + "train.lr\n";
        assert!(RunConfig::from_text(&text, "test").is_err());
        let text = minimal() + "lm.mechanism = triangular\n";
        assert!(RunConfig::from_text(&text, "test").is_err());
    }

    #[test]
    fn master_seed_decorrelates_stage_seeds() {
        let mut cfg = RunConfig::from_text(&minimal(), "test").unwrap();
        cfg.apply_master_seed(7);
        let seeds = [cfg.data_seed, cfg.codec_seed, cfg.visual_seed, cfg.train_seed, cfg.gen_seed];
        for i in 0..5 {
            for j in (i + 1)..5 {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
    }

    #[test]
    fn text_roundtrip_preserves_everything() {
        let mut cfg = RunConfig::from_text(&minimal(), "test").unwrap();
        cfg.lm_mechanism = Mechanism::CausalVisual;
        cfg.train_lr = 2.5e-4;
        cfg.data_n_train = 123;
        let text = cfg.to_text();
        let back = RunConfig::from_text(&text, "roundtrip").unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn derived_shapes_are_consistent() {
        let cfg = RunConfig::from_text(&minimal(), "test").unwrap();
        // 2 s at 16 kHz with hop 640 -> 25 frames/s -> 50 frames
        assert_eq!(cfg.l_frames(), 50);
        assert_eq!(cfg.s_steps(), 53);
        let mc = cfg.model_config();
        assert_eq!(mc.max_s, 54);
        // 5 visual frames per second
        assert_eq!(mc.max_t, 10);
        assert_eq!(cfg.gen_config(3.0).max_steps, 53);
    }

    #[test]
    fn validation_catches_cross_field_problems() {
        let mut cfg = RunConfig::from_text(&minimal(), "test").unwrap();
        cfg.visual_d_v = 3; // n_classes+1 = 4
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::from_text(&minimal(), "test").unwrap();
        cfg.featurizer_hop = 333; // does not divide 16000
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::from_text(&minimal(), "test").unwrap();
        cfg.lm_d_model = 130; // not divisible by heads
        assert!(cfg.validate().is_err());
    }
}
