//! AdamW training step with per-example condition dropout.
//!
//! Gradients are accumulated over a fixed chunking of the batch (sequential
//! inside a chunk, chunks reduced in index order), so the result is identical
//! no matter how many worker threads rayon actually uses.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::masks::AttentionMask;
use crate::patterns::StepSequence;
use crate::util::mix_seed3;
use crate::visual::VisualFeatures;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::backward::{backward, loss_and_dlogits};
use super::forward::{forward, CondSource};
use super::{LMParams, ParamSet};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub batch_size: usize,
    pub cond_dropout_p: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr: 1e-4,
            warmup_steps: 100,
            total_steps: 1000,
            betas: (0.9, 0.95),
            weight_decay: 0.1,
            batch_size: 8,
            cond_dropout_p: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        for (name, b) in [("beta1", self.betas.0), ("beta2", self.betas.1)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0,1), got {b}")));
            }
        }
        if !(0.0..=1.0).contains(&self.cond_dropout_p) {
            return Err(Error::Config(format!(
                "cond_dropout_p must be in [0,1], got {}",
                self.cond_dropout_p
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(Error::Config("batch_size and total_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Linear ramp 0 -> lr over warmup_steps, constant lr after.
pub fn lr_schedule(step: usize, t: &TrainConfig) -> f64 {
    if step >= t.warmup_steps {
        t.lr
    } else {
        t.lr * step as f64 / t.warmup_steps as f64
    }
}

pub struct TrainExample<'a> {
    pub feats: &'a VisualFeatures,
    pub steps: &'a StepSequence,
    pub mask: &'a AttentionMask,
}

pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(p: &LMParams) -> AdamState {
        let sizes: Vec<usize> = p.set.entries().iter().map(|e| e.data.len()).collect();
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Examples whose condition was replaced by the null row this step.
    pub dropped: usize,
    pub lr: f64,
}

const ADAM_EPS: f64 = 1e-8;
const GRAD_CHUNKS: usize = 8;

fn adamw_apply(
    p: &mut LMParams,
    grads: &ParamSet,
    opt: &mut AdamState,
    lr: f64,
    t_cfg: &TrainConfig,
) {
    opt.t += 1;
    let bc1 = 1.0 - t_cfg.betas.0.powi(opt.t as i32);
    let bc2 = 1.0 - t_cfg.betas.1.powi(opt.t as i32);
    let grefs = grads.entries();
    let mut prefs = p.set.entries_mut();
    for (i, (pr, gr)) in prefs.iter_mut().zip(&grefs).enumerate() {
        debug_assert_eq!(pr.name, gr.name);
        let (b1, b2) = t_cfg.betas;
        let m = &mut opt.m[i];
        let v = &mut opt.v[i];
        for (j, &g) in gr.data.iter().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            pr.data[j] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            if pr.decay {
                pr.data[j] -= lr * t_cfg.weight_decay * pr.data[j];
            }
        }
    }
}

/// One optimizer step over a batch. `step` is the global step number used for
/// both the lr schedule and the condition-dropout draws; call with 1-based
/// steps so the first update has a non-zero learning rate.
pub fn train_step(
    p: &mut LMParams,
    opt: &mut AdamState,
    batch: &[TrainExample<'_>],
    t_cfg: &TrainConfig,
    step: usize,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let chunk_size = batch.len().div_ceil(GRAD_CHUNKS);
    let chunks: Vec<(usize, &[TrainExample<'_>])> = batch
        .chunks(chunk_size)
        .enumerate()
        .map(|(ci, ch)| (ci * chunk_size, ch))
        .collect();

    let params: &LMParams = p;
    let partials: Vec<(ParamSet, f64, usize)> = chunks
        .par_iter()
        .map(|&(base, chunk)| -> Result<(ParamSet, f64, usize)> {
            let mut grads = ParamSet::zeros(&params.config);
            let mut loss_sum = 0.0;
            let mut dropped = 0usize;
            for (j, ex) in chunk.iter().enumerate() {
                let ex_seed = mix_seed3(t_cfg.seed, step as u64, (base + j) as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(ex_seed);
                let drop_cond = rng.random::<f64>() < t_cfg.cond_dropout_p;
                let act_seed = (params.config.dropout_rate > 0.0).then(|| rng.random::<u64>());
                let cond = if drop_cond {
                    dropped += 1;
                    CondSource::Null { t: ex.feats.t() }
                } else {
                    CondSource::Visual(ex.feats)
                };
                let out = forward(params, cond, ex.steps, ex.mask, true, act_seed)?;
                let (loss, dlogits) = loss_and_dlogits(&out.logits, ex.steps)?;
                let g = backward(params, out.cache.as_ref().unwrap(), &dlogits)?;
                grads.add_assign(&g);
                loss_sum += loss;
            }
            Ok((grads, loss_sum, dropped))
        })
        .collect::<Result<Vec<_>>>()?;

    // fixed-order reduction: chunk 0, 1, 2, ... regardless of thread timing
    let mut iter = partials.into_iter();
    let (mut grads, mut loss_sum, mut dropped) = iter.next().unwrap();
    for (g, l, d) in iter {
        grads.add_assign(&g);
        loss_sum += l;
        dropped += d;
    }
    let inv_b = 1.0 / batch.len() as f64;
    grads.scale(inv_b);
    let loss = loss_sum * inv_b;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss at step {step}")));
    }

    let lr = lr_schedule(step, t_cfg);
    adamw_apply(p, &grads, opt, lr, t_cfg);
    Ok(StepStats { loss, dropped, lr })
}
