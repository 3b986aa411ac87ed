//! Stage-1 pre-training and stage-2 fine-tuning loops.
//!
//! Batch order and dropout masks are pure functions of `(seed, step)`, so a run
//! resumed from a checkpoint replays exactly the batches an uninterrupted run
//! would have seen.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Temperature, Var};
use crate::contrastive::{fusion_on_tape, symmetric_on_tape, A_TO_T, AA, AF, AT, T_TO_A};
use crate::encoders::{AudioBatch, TextBatch, TEXT_PREFIX};
use crate::error::{HtclError, Result};
use crate::mel::MelSpectrogram;
use crate::model::{FeatureSet, Model, LOG_TAU};
use crate::nn::{Binder, ParamStore};
use crate::scalar::Scalar;
use crate::text::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Fine-tune on co-occurrence pairs instead of favoured triplets.
    CfPairs,
    /// Fine-tune with the audio/audio term only.
    NoText,
}

impl std::str::FromStr for Ablation {
    type Err = HtclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "cf_pairs" => Ok(Self::CfPairs),
            "no_text" => Ok(Self::NoText),
            other => Err(HtclError::config(
                "train.ablation",
                format!("`{other}` is not one of none, cf_pairs, no_text"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, scaled by the learning rate.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub lr_main: f64,
    pub lr_text: f64,
    pub optimizer: AdamConfig,
    pub steps: usize,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub deterministic_mode: bool,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl TrainConfig {
    /// Desk defaults for stage 1.
    pub fn pretrain() -> Self {
        Self {
            stage: Stage::Pretrain,
            batch_size: 64,
            lr_main: 1e-3,
            lr_text: 3e-4,
            optimizer: AdamConfig::default(),
            steps: 400,
            warmup_steps: 100,
            grad_clip: 1.0,
            seed: 0,
            deterministic_mode: true,
            ablation: Ablation::None,
        }
    }

    /// Desk defaults for stage 2.
    pub fn finetune() -> Self {
        Self {
            stage: Stage::Finetune,
            batch_size: 32,
            lr_main: 1e-4,
            lr_text: 3e-5,
            steps: 300,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(HtclError::config("train.batch_size", "must be at least 1"));
        }
        for (name, v) in [("train.lr_main", self.lr_main), ("train.lr_text", self.lr_text)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(HtclError::config(name, "must be a finite non-negative number"));
            }
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(HtclError::config("train.optimizer.beta1", "betas must lie in [0, 1)"));
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return Err(HtclError::config("train.optimizer.eps", "eps must be positive and weight_decay non-negative"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(HtclError::config("train.grad_clip", "must be non-negative"));
        }
        if self.stage == Stage::Pretrain && self.ablation != Ablation::None {
            return Err(HtclError::config("train.ablation", "ablations apply to fine-tuning only"));
        }
        Ok(())
    }

    fn lr_for(&self, name: &str, step: usize) -> f64 {
        let base = if name.starts_with(&format!("{TEXT_PREFIX}.")) {
            self.lr_text
        } else {
            self.lr_main
        };
        if self.warmup_steps == 0 {
            base
        } else {
            base * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState<T: Scalar> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    pub wall_ms: f64,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState<T: Scalar> {
    pub model: Model<T>,
    pub optim: AdamState<T>,
    /// Optimiser steps taken in the current stage.
    pub step: usize,
    pub history: Vec<LogRecord>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: Model<T>) -> Self {
        Self {
            model,
            optim: AdamState::default(),
            step: 0,
            history: Vec::new(),
        }
    }

    /// Starts a new stage from trained weights, discarding optimiser state and history.
    pub fn restart(self) -> Self {
        Self::new(self.model)
    }
}

/// Song ids of a batch: the training rows at the given step.
fn batch_rows(len: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    let b = batch.min(len);
    let per_epoch = len / b;
    let epoch = step / per_epoch;
    let k = step % per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(&mut rng);
    perm[k * b..(k + 1) * b].to_vec()
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d20b);
    rng.set_stream(step as u64);
    rng
}

/// Parameter groups touched by a stage.
fn trains(name: &str, cfg: &TrainConfig) -> bool {
    match (cfg.stage, cfg.ablation) {
        (Stage::Pretrain, _) => !name.starts_with("fusion."),
        (Stage::Finetune, Ablation::NoText) => name.starts_with("audio.") || name == LOG_TAU,
        (Stage::Finetune, _) => true,
    }
}

struct StepOutput {
    total: Var,
    components: Vec<(&'static str, Var)>,
}

fn audio_batch<T: Scalar>(features: &FeatureSet<T>, ids: &[usize]) -> Result<AudioBatch<T>> {
    let mels: Vec<&MelSpectrogram<T>> = ids.iter().map(|&i| features.mel(i)).collect::<Result<_>>()?;
    AudioBatch::from_mels(&mels)
}

fn text_batch<T: Scalar>(features: &FeatureSet<T>, ids: &[usize]) -> Result<TextBatch> {
    let toks: Vec<&TokenSequence> = ids.iter().map(|&i| features.tokens(i)).collect::<Result<_>>()?;
    TextBatch::from_sequences(&toks)
}

fn temperature<T: Scalar>(tape: &mut Tape<T>, binder: &mut Binder<'_, T>, model: &Model<T>) -> Result<Temperature<T>> {
    if model.params.contains(LOG_TAU) {
        Ok(Temperature::Learned(binder.var(tape, LOG_TAU)?))
    } else {
        Ok(Temperature::Fixed(T::lit(model.config.loss.temperature)))
    }
}

fn pretrain_graph<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    model: &Model<T>,
    features: &FeatureSet<T>,
    songs: &[usize],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<StepOutput> {
    let za = model.audio.forward(tape, binder, &audio_batch(features, songs)?, rng.as_deref_mut())?;
    let zt = model.text.forward(tape, binder, &text_batch(features, songs)?, rng)?;
    let tau = temperature(tape, binder, model)?;
    let (total, at, ta) = symmetric_on_tape(tape, za, zt, tau);
    Ok(StepOutput {
        total,
        components: vec![(A_TO_T, at), (T_TO_A, ta)],
    })
}

fn finetune_graph<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    model: &Model<T>,
    features: &FeatureSet<T>,
    pairs: &[(usize, usize)],
    audio_only: bool,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<StepOutput> {
    let b = pairs.len();
    let ids: Vec<usize> = pairs.iter().map(|p| p.0).chain(pairs.iter().map(|p| p.1)).collect();
    // trigger and recommendation audio share one encoder pass
    let za = model.audio.forward(tape, binder, &audio_batch(features, &ids)?, rng.as_deref_mut())?;
    let za_trig = tape.row_slice(za, 0, b);
    let za_rec = tape.row_slice(za, b, b);
    let tau = temperature(tape, binder, model)?;
    let w = &model.config.loss;
    let (l_aa, _, _) = symmetric_on_tape(tape, za_trig, za_rec, tau);
    let mut total = tape.scale(l_aa, T::lit(w.w_aa));
    let mut components = vec![(AA, l_aa)];
    if !audio_only {
        let rec: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let zt_rec = model.text.forward(tape, binder, &text_batch(features, &rec)?, rng)?;
        let zf = fusion_on_tape(tape, binder, za_rec, zt_rec)?;
        let (l_af, _, _) = symmetric_on_tape(tape, za_trig, zf, tau);
        let (l_at, _, _) = symmetric_on_tape(tape, za_rec, zt_rec, tau);
        let af = tape.scale(l_af, T::lit(w.w_af));
        let at = tape.scale(l_at, T::lit(w.w_at));
        total = tape.add(total, af);
        total = tape.add(total, at);
        components.push((AF, l_af));
        components.push((AT, l_at));
    }
    Ok(StepOutput { total, components })
}

/// Adam update with global-norm clipping over the trainable parameters in `grads`.
fn apply_update<T: Scalar>(state: &mut TrainState<T>, grads: BTreeMap<String, Array2<T>>, cfg: &TrainConfig) {
    let norm = grads
        .values()
        .map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        cfg.grad_clip / norm
    } else {
        1.0
    };
    let o = &cfg.optimizer;
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - o.beta1.powi(t);
    let bc2 = 1.0 - o.beta2.powi(t);
    let (b1, b2, eps) = (T::lit(o.beta1), T::lit(o.beta2), T::lit(o.eps));
    let clip = T::lit(clip);
    for (name, g) in grads {
        let lr = cfg.lr_for(&name, state.step);
        if lr == 0.0 {
            continue;
        }
        let shape = g.raw_dim();
        if !state.optim.m.contains(&name) {
            state.optim.m.insert(name.clone(), Array2::zeros(shape));
            state.optim.v.insert(name.clone(), Array2::zeros(shape));
        }
        let m = state.optim.m.get_mut(&name).expect("inserted above");
        Zip::from(&mut *m).and(&g).for_each(|m, &g| *m = b1 * *m + (T::one() - b1) * g * clip);
        let v = state.optim.v.get_mut(&name).expect("inserted above");
        Zip::from(&mut *v).and(&g).for_each(|v, &g| {
            let gc = g * clip;
            *v = b2 * *v + (T::one() - b2) * gc * gc
        });
        let m = state.optim.m.get(&name).expect("present");
        let v = state.optim.v.get(&name).expect("present");
        let p = state.model.params.get_mut(&name).expect("gradient names come from the store");
        let (step_size, decay) = (T::lit(lr / bc1), T::lit(lr * o.weight_decay));
        let sqrt_bc2 = T::lit(bc2.sqrt());
        Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
            *p -= step_size * m / ((v.sqrt() / sqrt_bc2) + eps) + decay * *p;
        });
    }
}

fn run<T: Scalar, F>(state: &mut TrainState<T>, cfg: &TrainConfig, rows: usize, mut graph: F) -> Result<()>
where
    F: FnMut(&mut Tape<T>, &mut Binder<'_, T>, &Model<T>, &[usize], &mut ChaCha8Rng) -> Result<StepOutput>,
{
    cfg.validate()?;
    if rows == 0 {
        return Err(HtclError::Data("training set is empty".into()));
    }
    let target = cfg.steps;
    while state.step < target {
        let started = Instant::now();
        let step = state.step;
        let idx = batch_rows(rows, cfg.batch_size, cfg.seed, step);
        let mut rng = step_rng(cfg.seed, step);
        let mut tape = Tape::new();
        let (out, grads) = {
            let params = &state.model.params;
            let mut binder = Binder::new(params);
            let out = graph(&mut tape, &mut binder, &state.model, &idx, &mut rng)?;
            let total = tape.scalar(out.total);
            if !total.is_finite() {
                return Err(HtclError::NonFiniteLoss {
                    step,
                    detail: format!("total loss {total}"),
                });
            }
            let mut g = tape.backward(out.total);
            let grads: BTreeMap<String, Array2<T>> = binder
                .bound()
                .filter(|(name, _)| trains(name, cfg))
                .filter_map(|(name, &v)| g.take(v).map(|g| (name.clone(), g)))
                .collect();
            (out, grads)
        };
        if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(HtclError::NonFiniteLoss {
                step,
                detail: format!("non-finite gradient for {name}"),
            });
        }
        apply_update(state, grads, cfg);
        state.history.push(LogRecord {
            step,
            total: tape.scalar(out.total).as_f64(),
            components: out
                .components
                .iter()
                .map(|(n, v)| (n.to_string(), tape.scalar(*v).as_f64()))
                .collect(),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        state.step += 1;
    }
    Ok(())
}

/// Stage 1: symmetric audio/text InfoNCE over `songs` until `cfg.steps` steps have been taken.
pub fn pretrain<T: Scalar>(
    state: &mut TrainState<T>,
    features: &FeatureSet<T>,
    songs: &[usize],
    cfg: &TrainConfig,
) -> Result<()> {
    if cfg.stage != Stage::Pretrain {
        return Err(HtclError::config("train.stage", "pretrain needs stage = pretrain"));
    }
    run(state, cfg, songs.len(), |tape, binder, model, idx, rng| {
        let batch: Vec<usize> = idx.iter().map(|&i| songs[i]).collect();
        pretrain_graph(tape, binder, model, features, &batch, Some(rng))
    })
}

/// Stage 2 over (trigger, recommendation) pairs; with `Ablation::CfPairs` the caller
/// passes co-occurrence pairs here.
pub fn finetune<T: Scalar>(
    state: &mut TrainState<T>,
    features: &FeatureSet<T>,
    pairs: &[(usize, usize)],
    cfg: &TrainConfig,
) -> Result<()> {
    if cfg.stage != Stage::Finetune {
        return Err(HtclError::config("train.stage", "finetune needs stage = finetune"));
    }
    let audio_only = cfg.ablation == Ablation::NoText;
    run(state, cfg, pairs.len(), |tape, binder, model, idx, rng| {
        let batch: Vec<(usize, usize)> = idx.iter().map(|&i| pairs[i]).collect();
        finetune_graph(tape, binder, model, features, &batch, audio_only, Some(rng))
    })
}

/// Loss value, its components and the gradient of every parameter the graph touches.
#[derive(Debug, Clone)]
pub struct LossGrads<T: Scalar> {
    pub total: T,
    pub components: BTreeMap<String, T>,
    pub grads: BTreeMap<String, Array2<T>>,
}

fn evaluate<T: Scalar, F>(model: &Model<T>, graph: F) -> Result<LossGrads<T>>
where
    F: FnOnce(&mut Tape<T>, &mut Binder<'_, T>) -> Result<StepOutput>,
{
    let mut tape = Tape::new();
    let mut binder = Binder::new(&model.params);
    let out = graph(&mut tape, &mut binder)?;
    let mut g = tape.backward(out.total);
    let grads = binder
        .bound()
        .filter_map(|(name, &v)| g.take(v).map(|g| (name.clone(), g)))
        .collect();
    Ok(LossGrads {
        total: tape.scalar(out.total),
        components: out
            .components
            .iter()
            .map(|(n, v)| (n.to_string(), tape.scalar(*v)))
            .collect(),
        grads,
    })
}

/// Stage-1 objective on one batch of songs, dropout off.
pub fn pretrain_loss<T: Scalar>(model: &Model<T>, features: &FeatureSet<T>, songs: &[usize]) -> Result<LossGrads<T>> {
    evaluate(model, |tape, binder| pretrain_graph(tape, binder, model, features, songs, None))
}

/// Stage-2 objective on one batch of (trigger, recommendation) pairs, dropout off.
pub fn finetune_loss<T: Scalar>(
    model: &Model<T>,
    features: &FeatureSet<T>,
    pairs: &[(usize, usize)],
    ablation: Ablation,
) -> Result<LossGrads<T>> {
    evaluate(model, |tape, binder| {
        finetune_graph(tape, binder, model, features, pairs, ablation == Ablation::NoText, None)
    })
}

/// Mean total loss over `history[range]`.
pub fn mean_loss(history: &[LogRecord], range: std::ops::Range<usize>) -> f64 {
    let slice = &history[range];
    slice.iter().map(|r| r.total).sum::<f64>() / slice.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_an_epoch_without_repeats() {
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_rows(20, 4, 9, s)).collect();
        seen.sort();
        assert_eq!(seen, (0..20).collect::<Vec<_>>());
        assert_eq!(batch_rows(20, 4, 9, 7), batch_rows(20, 4, 9, 7));
        assert_ne!(batch_rows(20, 4, 9, 5), batch_rows(20, 4, 9, 0));
        assert_eq!(batch_rows(3, 8, 0, 2).len(), 3);
    }

    #[test]
    fn learning_rate_groups_and_warmup() {
        let cfg = TrainConfig {
            warmup_steps: 10,
            ..TrainConfig::pretrain()
        };
        assert!((cfg.lr_for("text.proj.weight", 9) - 3e-4).abs() < 1e-15);
        assert!((cfg.lr_for("audio.proj.weight", 4) - 5e-4).abs() < 1e-15);
        assert!((cfg.lr_for("fusion.l1.weight", 100) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn ablation_parsing_and_validation() {
        assert_eq!("cf_pairs".parse::<Ablation>().unwrap(), Ablation::CfPairs);
        assert!("bogus".parse::<Ablation>().is_err());
        let bad = TrainConfig {
            ablation: Ablation::NoText,
            ..TrainConfig::pretrain()
        };
        assert!(bad.validate().is_err());
        let neg = TrainConfig {
            lr_main: -1.0,
            ..TrainConfig::pretrain()
        };
        assert!(neg.validate().unwrap_err().to_string().contains("lr_main"));
    }

    #[test]
    fn no_text_trains_audio_only() {
        let cfg = TrainConfig {
            ablation: Ablation::NoText,
            ..TrainConfig::finetune()
        };
        assert!(trains("audio.conv0.weight", &cfg));
        assert!(!trains("text.proj.weight", &cfg));
        assert!(!trains("fusion.l1.weight", &cfg));
        assert!(!trains("fusion.l1.weight", &TrainConfig::pretrain()));
    }
}
