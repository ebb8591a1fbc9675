//! BPTT training with AdamW and a warmup + cosine schedule, evaluation,
//! checkpoints and ablation sweeps.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cmqka::Pathways;
use crate::data_io::{decode_checkpoint, encode_checkpoint, mix_seed, Dataset, Split};
use crate::error::{Error, Result, ResultExt};
use crate::model::{ModelConfig, Snnergy};
use crate::nn::{Ctx, ParamId, ParamStore};
use crate::profiler::{measure_firing_rates, FiringRateStats};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` scales five warmup epochs per hundred, at least one.
    pub warmup_epochs: Option<usize>,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Where to write the checkpoint after every epoch (and on divergence).
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            lr_min: 0.0,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 30,
            batch_size: 16,
            warmup_epochs: None,
            clip_norm: 5.0,
            seed: 0,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_epochs.unwrap_or_else(|| (5 * self.epochs).div_ceil(100).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..=self.lr).contains(&self.lr_min) {
            return Err(Error::config("lr_min must lie in [0, lr]"));
        }
        if self.weight_decay < 0.0 || self.clip_norm < 0.0 || self.eps <= 0.0 {
            return Err(Error::config("weight decay and clip norm must be >= 0, eps > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be positive"));
        }
        if self.warmup() > self.epochs {
            return Err(Error::config(format!("{} warmup epochs exceed {} epochs", self.warmup(), self.epochs)));
        }
        Ok(())
    }
}

/// Per-step learning rate: linear warmup then cosine decay to `lr_min`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(cfg: &TrainConfig, steps_per_epoch: usize) -> Self {
        Self {
            lr_max: cfg.lr,
            lr_min: cfg.lr_min,
            warmup_steps: cfg.warmup() * steps_per_epoch,
            total_steps: cfg.epochs * steps_per_epoch,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr_max * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.lr_max;
        }
        let p = ((step + 1 - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Update every trainable parameter; parameters without a gradient see a zero one.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let by_id: HashMap<ParamId, &Tensor> = grads.iter().map(|(id, g)| (*id, g)).collect();
        let decay = (1.0 - lr * self.weight_decay) as f32;
        let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        for id in ids {
            let p = store.get(id);
            let g = by_id.get(&id).copied();
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::shape("adamw", g.shape(), p.shape()));
                }
            }
            let n = p.numel();
            let (m, v) = self.moments.entry(id).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let mut out = p.to_vec();
            for i in 0..n {
                let gi = g.map_or(0.0, |g| g.data()[i] as f64);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let upd = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                out[i] = out[i] * decay - upd as f32;
            }
            store.set(id, Tensor::from_vec(p.shape(), out)?)?;
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[(ParamId, Tensor)]) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|&x| x as f64 * x as f64)
        .sum::<f64>()
        .sqrt()
}

/// Rescale so the global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_top1: f64,
    pub val_loss: Option<f64>,
    pub val_top1: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub epochs: Vec<EpochMetrics>,
    pub test_top1: Option<f64>,
    pub test_loss: Option<f64>,
    pub firing_rates: Option<FiringRateStats>,
}

impl Metrics {
    pub fn final_val_top1(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.val_top1)
    }

    pub fn best_val_top1(&self) -> Option<f64> {
        self.epochs.iter().filter_map(|e| e.val_top1).reduce(f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,train_top1,val_loss,val_top1,wall_ms\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{:.6e},{:.6},{:.6},{},{},{}",
                e.epoch,
                e.lr,
                e.train_loss,
                e.train_top1,
                opt(e.val_loss),
                opt(e.val_top1),
                e.wall_ms
            );
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub samples: usize,
    pub loss: f64,
    pub top1: f64,
    pub firing_rates: FiringRateStats,
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits.data().chunks(k).zip(labels).filter(|(row, &l)| argmax(row) == l).count()
}

fn check_data(cfg: &ModelConfig, split: &Split) -> Result<()> {
    let s = split.video.shape();
    let a = split.audio.shape();
    if s[2] != cfg.video_channels || (s[3], s[4]) != cfg.input_hw {
        return Err(Error::shape("video data vs model", s, &[0, 0, cfg.video_channels, cfg.input_hw.0, cfg.input_hw.1]));
    }
    if a[2] != cfg.audio_channels || (a[3], a[4]) != cfg.input_hw {
        return Err(Error::shape("audio data vs model", a, &[0, 0, cfg.audio_channels, cfg.input_hw.0, cfg.input_hw.1]));
    }
    if let Some(&l) = split.labels.iter().find(|&&l| l >= cfg.num_classes) {
        return Err(Error::validation(format!("label {l} out of range for {} classes", cfg.num_classes)));
    }
    Ok(())
}

/// Eval-mode accuracy, mean loss and firing rates over a split.
pub fn evaluate(model: &Snnergy, store: &ParamStore, split: &Split, batch_size: usize) -> Result<EvalResult> {
    if split.is_empty() {
        return Err(Error::validation("cannot evaluate an empty split"));
    }
    check_data(&model.cfg, split)?;
    let t = model.cfg.timesteps;
    let idx: Vec<usize> = (0..split.len()).collect();
    let (mut loss, mut hits) = (0.0, 0usize);
    let mut rates = FiringRateStats::default();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (v, a, labels) = split.batch(chunk, t)?;
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, store, false);
        let out = model.forward(&ctx, &tape.constant(v), &tape.constant(a))?;
        loss += out.logits.cross_entropy(&labels)?.value().item() as f64 * chunk.len() as f64;
        hits += correct(out.logits.value(), &labels);
        rates.absorb(&ctx.spike_records());
    }
    Ok(EvalResult {
        samples: split.len(),
        loss: loss / split.len() as f64,
        top1: hits as f64 / split.len() as f64,
        firing_rates: rates,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointConfig {
    model: ModelConfig,
}

pub fn checkpoint_bytes(cfg: &ModelConfig, store: &ParamStore) -> Result<Vec<u8>> {
    let tensors: Vec<(String, Tensor)> = store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
    encode_checkpoint(&CheckpointConfig { model: cfg.clone() }, &tensors)
}

pub fn save_checkpoint(path: impl AsRef<Path>, cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint_bytes(cfg, store)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
    }
    std::fs::write(path, bytes).with_context(|| path.display().to_string())
}

/// Rebuild the model described by a checkpoint and load every tensor into it.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(Snnergy, ParamStore)> {
    let (cc, tensors) = decode_checkpoint::<CheckpointConfig>(bytes)?;
    let mut store = ParamStore::new();
    let model = Snnergy::new(cc.model, &mut store)?;
    let mut seen = vec![false; store.len()];
    for (name, t) in tensors {
        let id = store.id(&name).ok_or_else(|| Error::validation(format!("checkpoint tensor '{name}' does not belong to the model")))?;
        store.set(id, t).with_context(|| format!("checkpoint tensor '{name}'"))?;
        seen[store.iter().position(|(i, _)| i == id).unwrap_or(0)] = true;
    }
    if let Some((_, p)) = store.iter().zip(&seen).find(|(_, s)| !**s).map(|(p, _)| p) {
        return Err(Error::validation(format!("checkpoint is missing tensor '{}'", p.name)));
    }
    Ok((model, store))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Snnergy, ParamStore)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).with_context(|| path.display().to_string())?;
    checkpoint_from_bytes(&bytes).with_context(|| path.display().to_string())
}

pub struct Trained {
    pub model: Snnergy,
    pub store: ParamStore,
    pub metrics: Metrics,
}

/// Train from scratch. Loss is cross-entropy on the time-averaged logits,
/// backpropagated through all timesteps.
pub fn train(model_cfg: &ModelConfig, cfg: &TrainConfig, data: &Dataset) -> Result<Trained> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let model = Snnergy::new(model_cfg.clone(), &mut store)?;
    let split = &data.train;
    if split.is_empty() {
        return Err(Error::validation("training split is empty"));
    }
    check_data(model_cfg, split)?;
    let t = model_cfg.timesteps;
    let per_epoch = split.len().div_ceil(cfg.batch_size);
    let sched = LrSchedule::new(cfg, per_epoch);
    let mut opt = AdamW::new(cfg);
    let mut metrics = Metrics::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..split.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64)));
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        let mut lr = sched.at(step);
        for chunk in order.chunks(cfg.batch_size) {
            let (v, a, labels) = split.batch(chunk, t)?;
            let (loss, n_hit, mut grads, buffers) = {
                let tape = Tape::new();
                let ctx = Ctx::new(&tape, &store, true);
                let out = model.forward(&ctx, &tape.constant(v), &tape.constant(a))?;
                let loss = out.logits.cross_entropy(&labels)?;
                let lv = loss.value().item();
                if !lv.is_finite() {
                    (lv, 0, Vec::new(), Vec::new())
                } else {
                    loss.backward()?;
                    (lv, correct(out.logits.value(), &labels), ctx.param_grads()?, ctx.take_buffer_updates())
                }
            };
            let norm = clip_global_norm(&mut grads, cfg.clip_norm);
            if !loss.is_finite() || !norm.is_finite() {
                if let Some(p) = &cfg.checkpoint_path {
                    save_checkpoint(p, model_cfg, &store)?;
                }
                return Err(Error::Diverged { epoch, step, loss });
            }
            for (id, value) in buffers {
                store.set(id, value)?;
            }
            lr = sched.at(step);
            opt.step(&mut store, &grads, lr)?;
            loss_sum += loss as f64 * chunk.len() as f64;
            hits += n_hit;
            step += 1;
        }
        let val = if data.val.is_empty() {
            None
        } else {
            Some(evaluate(&model, &store, &data.val, cfg.batch_size)?)
        };
        let em = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / split.len() as f64,
            train_top1: hits as f64 / split.len() as f64,
            val_loss: val.as_ref().map(|v| v.loss),
            val_top1: val.as_ref().map(|v| v.top1),
            wall_ms: start.elapsed().as_millis() as u64,
        };
        log::info!(
            "epoch {:>3} lr {:.2e} train loss {:.4} acc {:.3} val acc {}",
            epoch,
            em.lr,
            em.train_loss,
            em.train_top1,
            em.val_top1.map_or("-".into(), |v| format!("{v:.3}"))
        );
        metrics.epochs.push(em);
        if let Some(v) = val {
            metrics.firing_rates = Some(v.firing_rates);
        }
        if let Some(p) = &cfg.checkpoint_path {
            save_checkpoint(p, model_cfg, &store)?;
        }
    }
    if !data.test.is_empty() {
        let r = evaluate(&model, &store, &data.test, cfg.batch_size)?;
        metrics.test_top1 = Some(r.top1);
        metrics.test_loss = Some(r.loss);
    }
    Ok(Trained { model, store, metrics })
}

/// Firing rates of one forward pass over the first `batch` samples of a split.
pub fn snapshot_rates(model: &Snnergy, store: &ParamStore, split: &Split, batch: usize) -> Result<FiringRateStats> {
    let n = batch.min(split.len());
    if n == 0 {
        return Err(Error::validation("cannot measure rates on an empty split"));
    }
    let idx: Vec<usize> = (0..n).collect();
    let (v, a, _) = split.batch(&idx, model.cfg.timesteps)?;
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, store, false);
    model.forward(&ctx, &tape.constant(v), &tape.constant(a))?;
    measure_firing_rates(&ctx.spike_records())
}

#[derive(Clone, Debug, PartialEq)]
pub enum AblationAxis {
    Timesteps(Vec<usize>),
    Pathway(Vec<Pathways>),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub value: String,
    pub top1: f64,
    pub loss: f64,
    pub wall_ms: u64,
}

/// Model variant for one sweep value.
pub fn ablation_variants(axis: &AblationAxis, base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    match axis {
        AblationAxis::Timesteps(ts) => ts
            .iter()
            .map(|&t| (t.to_string(), ModelConfig { timesteps: t, ..base.clone() }))
            .collect(),
        AblationAxis::Pathway(ps) => ps
            .iter()
            .map(|&p| {
                let mut c = base.clone();
                c.cmqka.pathways = p;
                (p.as_str().to_string(), c)
            })
            .collect(),
    }
}

/// Train every variant with the same seed and score it on the test split
/// (validation split when the test split is empty).
pub fn ablation_sweep(axis: &AblationAxis, base: &ModelConfig, cfg: &TrainConfig, data: &Dataset) -> Result<Vec<AblationRow>> {
    let variants = ablation_variants(axis, base);
    if variants.is_empty() {
        return Err(Error::config("ablation sweep has no values"));
    }
    let scored = if data.test.is_empty() { &data.val } else { &data.test };
    let mut rows = Vec::new();
    for (value, mc) in variants {
        let start = Instant::now();
        let trained = train(&mc, cfg, data).with_context(|| format!("ablation variant {value}"))?;
        let r = evaluate(&trained.model, &trained.store, scored, cfg.batch_size)?;
        rows.push(AblationRow {
            value,
            top1: r.top1,
            loss: r.loss,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("value,top1,loss,wall_ms\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.6},{}", r.value, r.top1, r.loss, r.wall_ms);
    }
    s
}
