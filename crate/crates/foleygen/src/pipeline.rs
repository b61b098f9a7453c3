//! Stage orchestration behind the CLI subcommands.
//!
//! Every stage writes its artifacts under `out_dir` together with a
//! fingerprint sidecar recording the exact configuration that produced them.
//! Rerunning a stage with an unchanged fingerprint skips the work; any other
//! rerun rebuilds deterministically, so artifacts only ever change when the
//! configuration does.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::featurizer::featurize;
use crate::infer::{generate, GenConfig};
use crate::lm::{
    load_checkpoint, save_checkpoint, train_step, AdamState, LMParams, TrainExample,
};
use crate::masks::{build_mask, AttentionMask, Mechanism};
use crate::metrics::{
    alignment_score, detect_onsets, embed_stats, episode_embedding, frechet_distance, label_kld,
    toy_classify,
};
use crate::patterns::{apply_delay, StepSequence};
use crate::rvq::{load_model, rvq_encode, save_model, save_tokens, train_codebooks};
use crate::toy_data::{
    make_dataset, read_manifest, write_events_file, DatasetManifest, EpisodeRecord, Split,
    VisualTrack,
};
use crate::util::mix_seed;
use crate::visual::{encode_visual, VisualFeatures};
use crate::wav::{read_wav, write_wav};

pub const MECHANISMS: [Mechanism; 3] =
    [Mechanism::AllFrame, Mechanism::CausalVisual, Mechanism::FrameSpecific];

/// Stream index for deriving the parameter-init seed from train.seed.
const INIT_STREAM: u64 = 0x1297;
/// Stream index for deriving the batch-order seed from train.seed.
const ORDER_STREAM: u64 = 0x0bde7;

fn read_fp(path: &Path) -> Option<String> {
    fs::read_to_string(path).ok()
}

fn write_fp(path: &Path, value: &str) -> Result<()> {
    fs::write(path, value).map_err(|e| Error::io(path, e))
}

fn up_to_date(fp_file: &Path, want: &str, artifact: &Path) -> bool {
    artifact.exists() && read_fp(fp_file).as_deref() == Some(want)
}

fn require(path: &Path, produced_by: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "missing {} (run `{produced_by}` first)",
            path.display()
        )))
    }
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))
}

fn episode_stem(id: usize) -> String {
    format!("ep_{id:05}")
}

/// The fixed episode set used by both generate and eval: the first
/// `gen.n_episodes` test records.
fn eval_records(cfg: &RunConfig, manifest: &DatasetManifest) -> Vec<EpisodeRecord> {
    manifest.split(Split::Test).take(cfg.gen_n_episodes).cloned().collect()
}

fn visual_features_for(cfg: &RunConfig, record: &EpisodeRecord) -> Result<VisualFeatures> {
    let track = VisualTrack::from_events(
        cfg.data_duration_s,
        record.events.clone(),
        cfg.visual_frame_rate,
    );
    encode_visual(
        &track,
        cfg.data_n_classes,
        cfg.visual_d_v,
        mix_seed(cfg.visual_seed, record.id as u64),
    )
}

// ---- synth-data -------------------------------------------------------------

pub fn run_synth_data(cfg: &RunConfig, force: bool) -> Result<()> {
    ensure_out_dir(cfg)?;
    let root = cfg.data_dir();
    let fp_file = cfg.out_dir.join("data.fp");
    let manifest = DatasetManifest::manifest_path(&root);
    if !force && up_to_date(&fp_file, &cfg.fp_data(), &manifest) {
        println!("synth-data: up to date at {}", root.display());
        return Ok(());
    }
    if root.exists() {
        fs::remove_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    }
    let spec = cfg.episode_spec()?;
    let ds = make_dataset(&spec, cfg.data_n_train, cfg.data_n_test, cfg.data_seed, &root)?;
    write_fp(&fp_file, &cfg.fp_data())?;
    println!(
        "synth-data: wrote {} train + {} test episodes to {}",
        ds.split(Split::Train).count(),
        ds.split(Split::Test).count(),
        root.display()
    );
    Ok(())
}

// ---- train-codec ------------------------------------------------------------

pub fn run_train_codec(cfg: &RunConfig, force: bool) -> Result<()> {
    ensure_out_dir(cfg)?;
    let out = cfg.codec_path();
    let fp_file = cfg.out_dir.join("codec.rvqm.fp");
    if !force && up_to_date(&fp_file, &cfg.fp_codec(), &out) {
        println!("train-codec: up to date at {}", out.display());
        return Ok(());
    }
    let manifest_path = DatasetManifest::manifest_path(&cfg.data_dir());
    require(&manifest_path, "synth-data")?;
    let manifest = read_manifest(&manifest_path)?;
    let fz = cfg.featurizer()?;

    let latents = manifest
        .split(Split::Train)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|r| featurize(&read_wav(&r.wav_path)?, &fz))
        .collect::<Result<Vec<_>>>()?;
    let frames: usize = latents.iter().map(|z| z.frames.nrows()).sum();
    let model = train_codebooks(&latents, &cfg.rvq_config(), cfg.codec_seed)?;
    save_model(&out, &model)?;
    write_fp(&fp_file, &cfg.fp_codec())?;
    println!(
        "train-codec: {} codebooks x {} codes from {frames} frames -> {}",
        model.config.n_q,
        model.config.codebook_size,
        out.display()
    );
    Ok(())
}

// ---- train-lm ---------------------------------------------------------------

/// Teacher-forcing inputs for one episode.
fn prepare_example(
    cfg: &RunConfig,
    record: &EpisodeRecord,
    fz: &crate::featurizer::FeaturizerConfig,
    codec: &crate::rvq::RVQModel,
) -> Result<(VisualFeatures, StepSequence)> {
    let wave = read_wav(&record.wav_path)?;
    let grid = rvq_encode(codec, &featurize(&wave, fz)?)?;
    let steps = apply_delay(&grid)?;
    let feats = visual_features_for(cfg, record)?;
    Ok((feats, steps))
}

fn training_mask(cfg: &RunConfig, mechanism: Mechanism) -> Result<AttentionMask> {
    let fz = cfg.featurizer()?;
    build_mask(&crate::masks::MaskSpec {
        mechanism,
        t_visual: cfg.t_frames(),
        s_audio: cfg.s_steps() + 1,
        frame_rate_a: fz.frame_rate_a(),
        frame_rate_v: cfg.visual_frame_rate,
    })
}

pub fn run_train_lm(
    cfg: &RunConfig,
    mechanism: Mechanism,
    resume: bool,
    force: bool,
) -> Result<()> {
    ensure_out_dir(cfg)?;
    let ckpt = cfg.checkpoint_path(mechanism);
    let fp_file = cfg.out_dir.join(format!("lm_{mechanism}.fglm.fp"));
    if !force && up_to_date(&fp_file, &cfg.fp_lm(mechanism), &ckpt) {
        println!("train-lm[{mechanism}]: up to date at {}", ckpt.display());
        return Ok(());
    }
    let manifest_path = DatasetManifest::manifest_path(&cfg.data_dir());
    require(&manifest_path, "synth-data")?;
    require(&cfg.codec_path(), "train-codec")?;
    let manifest = read_manifest(&manifest_path)?;
    let codec = load_model(&cfg.codec_path())?;
    let fz = cfg.featurizer()?;
    let mc = cfg.model_config();
    let t_cfg = cfg.train_config();
    t_cfg.validate()?;

    let train_records: Vec<&EpisodeRecord> = manifest.split(Split::Train).collect();
    let examples = train_records
        .par_iter()
        .map(|r| prepare_example(cfg, r, &fz, &codec))
        .collect::<Result<Vec<_>>>()?;
    let mask = training_mask(cfg, mechanism)?;

    let mut params = if resume && ckpt.exists() {
        let loaded = load_checkpoint(&ckpt)?;
        if loaded.config != mc {
            return Err(Error::Config(format!(
                "cannot resume: {} was trained with a different model configuration",
                ckpt.display()
            )));
        }
        println!("train-lm[{mechanism}]: resuming from {}", ckpt.display());
        loaded
    } else {
        LMParams::init(&mc, mix_seed(cfg.train_seed, INIT_STREAM))?
    };
    let mut opt = AdamState::new(&params);
    let mut order_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.train_seed, ORDER_STREAM));
    let n = examples.len();
    let per_batch = t_cfg.batch_size.min(n);

    for step in 1..=t_cfg.total_steps {
        let idx = rand::seq::index::sample(&mut order_rng, n, per_batch);
        let batch: Vec<TrainExample> = idx
            .iter()
            .map(|i| TrainExample { feats: &examples[i].0, steps: &examples[i].1, mask: &mask })
            .collect();
        let stats = train_step(&mut params, &mut opt, &batch, &t_cfg, step)?;
        if step == 1 || step == t_cfg.total_steps || step % cfg.train_log_every == 0 {
            println!(
                "train-lm[{mechanism}] step {step}/{} loss {:.4} lr {:.3e} dropped {}",
                t_cfg.total_steps, stats.loss, stats.lr, stats.dropped
            );
        }
    }
    save_checkpoint(&ckpt, &params)?;
    write_fp(&fp_file, &cfg.fp_lm(mechanism))?;
    println!("train-lm[{mechanism}]: saved {}", ckpt.display());
    Ok(())
}

// ---- generate ---------------------------------------------------------------

pub fn run_generate(cfg: &RunConfig, mechanism: Mechanism, force: bool) -> Result<()> {
    ensure_out_dir(cfg)?;
    let gdir = cfg.gen_dir(mechanism);
    let fp_file = cfg.out_dir.join(format!("gen_{mechanism}.fp"));
    if !force && up_to_date(&fp_file, &cfg.fp_gen(mechanism), &gdir) {
        println!("generate[{mechanism}]: up to date at {}", gdir.display());
        return Ok(());
    }
    let ckpt = cfg.checkpoint_path(mechanism);
    if !ckpt.exists() {
        return Err(Error::Config(format!(
            "checkpoint not found: {} (run `train-lm` first)",
            ckpt.display()
        )));
    }
    let manifest_path = DatasetManifest::manifest_path(&cfg.data_dir());
    require(&manifest_path, "synth-data")?;
    require(&cfg.codec_path(), "train-codec")?;
    let manifest = read_manifest(&manifest_path)?;
    let codec = load_model(&cfg.codec_path())?;
    let params = load_checkpoint(&ckpt)?;
    if params.config != cfg.model_config() {
        return Err(Error::Config(format!(
            "{} was trained with a different model configuration; retrain or fix the config",
            ckpt.display()
        )));
    }
    let fz = cfg.featurizer()?;
    let spec = cfg.episode_spec()?;
    let records = eval_records(cfg, &manifest);
    if records.is_empty() {
        return Err(Error::Config("no test episodes to generate for".into()));
    }
    if gdir.exists() {
        fs::remove_dir_all(&gdir).map_err(|e| Error::io(&gdir, e))?;
    }
    fs::create_dir_all(&gdir).map_err(|e| Error::io(&gdir, e))?;

    records.par_iter().try_for_each(|r| -> Result<()> {
        let feats = visual_features_for(cfg, r)?;
        let g = GenConfig {
            seed: mix_seed(cfg.gen_seed, r.id as u64),
            ..cfg.gen_config(cfg.gen_cfg_scale)
        };
        let (grid, wave) = generate(&params, &codec, &fz, &feats, &g, mechanism)?;
        let stem = episode_stem(r.id);
        write_wav(&gdir.join(format!("{stem}.wav")), &wave)?;
        save_tokens(&gdir.join(format!("{stem}.rvqt")), &grid)?;
        let detected = detect_onsets(&wave, &spec)?;
        write_events_file(&gdir.join(format!("{stem}.gen.events")), &detected)?;
        Ok(())
    })?;
    write_fp(&fp_file, &cfg.fp_gen(mechanism))?;
    println!(
        "generate[{mechanism}]: {} episodes (cfg_scale {}) -> {}",
        records.len(),
        cfg.gen_cfg_scale,
        gdir.display()
    );
    Ok(())
}

// ---- eval -------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub n: usize,
    pub window_ms: f64,
    pub class_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub label_kld: f64,
    pub frechet: f64,
}

impl EvalSummary {
    fn to_kv(self) -> String {
        format!(
            "n = {}\nwindow_ms = {}\nclass_accuracy = {}\nprecision = {}\nrecall = {}\n\
             label_kld = {}\nfrechet = {}\n",
            self.n,
            self.window_ms,
            self.class_accuracy,
            self.precision,
            self.recall,
            self.label_kld,
            self.frechet
        )
    }

    fn report(&self, mechanism: Mechanism) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "eval {mechanism}: {} episodes, alignment window {} ms",
            self.n, self.window_ms
        );
        let _ = writeln!(s, "  class_accuracy  {:.4}", self.class_accuracy);
        let _ = writeln!(s, "  precision       {:.4}", self.precision);
        let _ = writeln!(s, "  recall          {:.4}", self.recall);
        let _ = writeln!(s, "  label_kld       {:.4}", self.label_kld);
        let _ = writeln!(s, "  frechet         {:.4}", self.frechet);
        s
    }
}

pub fn read_eval_kv(path: &Path) -> Result<EvalSummary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut s = EvalSummary {
        n: 0,
        window_ms: f64::NAN,
        class_accuracy: f64::NAN,
        precision: f64::NAN,
        recall: f64::NAN,
        label_kld: f64::NAN,
        frechet: f64::NAN,
    };
    for line in text.lines() {
        let Some((k, v)) = line.split_once('=') else { continue };
        let (k, v) = (k.trim(), v.trim());
        let bad = || Error::Format(format!("bad eval value for {k}: {v:?}"));
        match k {
            "n" => s.n = v.parse().map_err(|_| bad())?,
            "window_ms" => s.window_ms = v.parse().map_err(|_| bad())?,
            "class_accuracy" => s.class_accuracy = v.parse().map_err(|_| bad())?,
            "precision" => s.precision = v.parse().map_err(|_| bad())?,
            "recall" => s.recall = v.parse().map_err(|_| bad())?,
            "label_kld" => s.label_kld = v.parse().map_err(|_| bad())?,
            "frechet" => s.frechet = v.parse().map_err(|_| bad())?,
            other => return Err(Error::Format(format!("unknown eval key {other:?}"))),
        }
    }
    if s.n == 0 || !s.window_ms.is_finite() {
        return Err(Error::Format(format!("incomplete eval file {}", path.display())));
    }
    Ok(s)
}

pub fn run_eval(cfg: &RunConfig, mechanism: Mechanism, force: bool) -> Result<EvalSummary> {
    ensure_out_dir(cfg)?;
    let kv_path = cfg.eval_kv_path(mechanism);
    let fp_file = cfg.out_dir.join(format!("eval_{mechanism}.fp"));
    if !force && up_to_date(&fp_file, &cfg.fp_eval(mechanism), &kv_path) {
        println!("eval[{mechanism}]: up to date at {}", kv_path.display());
        return read_eval_kv(&kv_path);
    }
    let manifest_path = DatasetManifest::manifest_path(&cfg.data_dir());
    require(&manifest_path, "synth-data")?;
    let manifest = read_manifest(&manifest_path)?;
    let spec = cfg.episode_spec()?;
    let fz = cfg.featurizer()?;
    let gdir = cfg.gen_dir(mechanism);
    let records = eval_records(cfg, &manifest);
    for r in &records {
        require(&gdir.join(format!("{}.wav", episode_stem(r.id))), "generate")?;
    }

    struct PerEpisode {
        align: crate::metrics::AlignmentScore,
        kld: f64,
        ref_emb: Vec<f64>,
        gen_emb: Vec<f64>,
    }
    let per = records
        .par_iter()
        .map(|r| -> Result<PerEpisode> {
            let ref_wav = read_wav(&r.wav_path)?;
            let gen_wav = read_wav(&gdir.join(format!("{}.wav", episode_stem(r.id))))?;
            let truth = VisualTrack::from_events(
                cfg.data_duration_s,
                r.events.clone(),
                cfg.visual_frame_rate,
            );
            let align = alignment_score(&truth, &gen_wav, &spec, cfg.eval_window_ms)?;
            let p = toy_classify(&ref_wav, &spec)?;
            let q = toy_classify(&gen_wav, &spec)?;
            let kld = label_kld(&p, &q)?;
            Ok(PerEpisode {
                align,
                kld,
                ref_emb: episode_embedding(&ref_wav, &fz)?,
                gen_emb: episode_embedding(&gen_wav, &fz)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n = per.len();
    let inv = 1.0 / n as f64;
    let ref_stats = embed_stats(&per.iter().map(|e| e.ref_emb.clone()).collect::<Vec<_>>())?;
    let gen_stats = embed_stats(&per.iter().map(|e| e.gen_emb.clone()).collect::<Vec<_>>())?;
    let summary = EvalSummary {
        n,
        window_ms: cfg.eval_window_ms,
        class_accuracy: per.iter().map(|e| e.align.class_accuracy).sum::<f64>() * inv,
        precision: per.iter().map(|e| e.align.precision).sum::<f64>() * inv,
        recall: per.iter().map(|e| e.align.recall).sum::<f64>() * inv,
        label_kld: per.iter().map(|e| e.kld).sum::<f64>() * inv,
        frechet: frechet_distance(&ref_stats, &gen_stats)?,
    };

    let report = summary.report(mechanism);
    fs::write(cfg.eval_report_path(mechanism), &report)
        .map_err(|e| Error::io(cfg.eval_report_path(mechanism), e))?;
    fs::write(&kv_path, summary.to_kv()).map_err(|e| Error::io(&kv_path, e))?;
    write_fp(&fp_file, &cfg.fp_eval(mechanism))?;
    print!("{report}");
    Ok(summary)
}

// ---- compare-attention --------------------------------------------------------

pub fn run_compare_attention(cfg: &RunConfig, force: bool) -> Result<Vec<(Mechanism, EvalSummary)>> {
    let mut rows = Vec::new();
    for mechanism in MECHANISMS {
        run_train_lm(cfg, mechanism, false, force)?;
        run_generate(cfg, mechanism, force)?;
        rows.push((mechanism, run_eval(cfg, mechanism, force)?));
    }
    let mut table = String::new();
    let _ = writeln!(
        table,
        "compare-attention: {} test episodes per mechanism, alignment window {} ms",
        rows[0].1.n, cfg.eval_window_ms
    );
    let _ = writeln!(
        table,
        "reference expectation at full scale: all_frame >= causal_visual >= frame_specific \
         on overall quality (recorded for context, not asserted here)"
    );
    let _ = writeln!(table);
    let _ = writeln!(
        table,
        "{:<16} {:>10} {:>10} {:>8} {:>10} {:>9}",
        "mechanism", "class_acc", "precision", "recall", "label_kld", "frechet"
    );
    for (m, s) in &rows {
        let _ = writeln!(
            table,
            "{:<16} {:>10.4} {:>10.4} {:>8.4} {:>10.4} {:>9.4}",
            m.to_string(),
            s.class_accuracy,
            s.precision,
            s.recall,
            s.label_kld,
            s.frechet
        );
    }
    let path = cfg.compare_report_path();
    fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    print!("{table}");
    println!("compare-attention: wrote {}", path.display());
    Ok(rows)
}
