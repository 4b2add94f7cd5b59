//! Reconstruction training of the style encoder, content encoder and
//! decoder. The speech encoder and the quantizer stay fixed.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bottleneck::Quantizer;
use crate::checkpoint::{self, MODEL_FILE, OPTIMIZER_FILE, TRAIN_STATE_FILE};
use crate::decoder::ReconstructionLoss;
use crate::error::{Error, Result};
use crate::features::{encode, SpeechEncoderBackend};
use crate::manifest::Manifest;
use crate::model::{ModelConfig, VcModel};
use crate::nn;
use crate::signal::{MelExtractor, Waveform};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_DIR: &str = "best";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    OneCycle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub grad_clip_norm: f64,
    pub optimizer: Optimizer,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lr_schedule: LrSchedule,
    /// Fraction of all steps spent warming up to `max_lr`.
    pub warmup_fraction: f64,
    /// The schedule starts at `max_lr / initial_lr_divisor`...
    pub initial_lr_divisor: f64,
    /// ...and ends at `max_lr / final_lr_divisor`.
    pub final_lr_divisor: f64,
    pub crop_start_s: f64,
    pub crop_end_s: f64,
    pub crop_jitter: f64,
    pub validation_crop_s: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            max_lr: 6e-4,
            grad_clip_norm: 1.0,
            optimizer: Optimizer::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lr_schedule: LrSchedule::OneCycle,
            warmup_fraction: 0.3,
            initial_lr_divisor: 25.0,
            final_lr_divisor: 100.0,
            crop_start_s: 0.6,
            crop_end_s: 10.2,
            crop_jitter: 0.2,
            validation_crop_s: 4.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("training.max_lr", self.max_lr),
            ("training.grad_clip_norm", self.grad_clip_norm),
            ("training.crop_start_s", self.crop_start_s),
            ("training.crop_end_s", self.crop_end_s),
            ("training.validation_crop_s", self.validation_crop_s),
            ("training.adam_eps", self.adam_eps),
            ("training.initial_lr_divisor", self.initial_lr_divisor),
            ("training.final_lr_divisor", self.final_lr_divisor),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("training.epochs and training.batch_size must be positive"));
        }
        if self.crop_start_s >= self.crop_end_s {
            return Err(Error::config("training.crop_start_s must be below training.crop_end_s"));
        }
        if !(0.0..1.0).contains(&self.crop_jitter) {
            return Err(Error::config("training.crop_jitter must be in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("training.warmup_fraction must be in [0, 1]"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("training.{name} must be in [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_utterances: usize) -> usize {
        n_utterances.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n_utterances: usize) -> usize {
        self.epochs * self.steps_per_epoch(n_utterances)
    }
}

/// Base crop length at `step`: linear from `crop_start_s` at step 0 to
/// `crop_end_s` at `total_steps`, hitting both ends exactly.
pub fn crop_base_s(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return if step == 0 && total_steps == 0 { cfg.crop_start_s } else { cfg.crop_end_s };
    }
    let f = step as f64 / total_steps as f64;
    (cfg.crop_start_s + (cfg.crop_end_s - cfg.crop_start_s) * f).min(cfg.crop_end_s)
}

/// Sampled crop length: uniform within `±crop_jitter` of the base.
pub fn crop_schedule(step: usize, total_steps: usize, cfg: &TrainConfig, rng: &mut impl Rng) -> f64 {
    let base = crop_base_s(step, total_steps, cfg);
    let lo = base * (1.0 - cfg.crop_jitter);
    let hi = base * (1.0 + cfg.crop_jitter);
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        base
    }
}

/// One-cycle learning rate: cosine warmup from `max_lr / initial_lr_divisor`
/// to `max_lr`, then cosine annealing to `max_lr / final_lr_divisor`.
#[derive(Debug, Clone, PartialEq)]
pub struct OneCycle {
    pub max_lr: f64,
    pub initial_lr: f64,
    pub final_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl OneCycle {
    pub fn new(cfg: &TrainConfig, total_steps: usize) -> Self {
        let warmup_steps = ((cfg.warmup_fraction * total_steps as f64).round() as usize).min(total_steps.saturating_sub(1));
        Self {
            max_lr: cfg.max_lr,
            initial_lr: cfg.max_lr / cfg.initial_lr_divisor,
            final_lr: cfg.max_lr / cfg.final_lr_divisor,
            total_steps,
            warmup_steps,
        }
    }

    /// Learning rate used for the update at `step` (0-based).
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let p = step as f64 / self.warmup_steps as f64;
            return self.initial_lr + (self.max_lr - self.initial_lr) * (1.0 - (PI * p).cos()) / 2.0;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps + 1);
        if step == self.warmup_steps || span == 0 {
            return self.max_lr;
        }
        let p = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.final_lr + (self.max_lr - self.final_lr) * (1.0 + (PI * p).cos()) / 2.0
    }

    pub fn peak_step(&self) -> usize {
        self.warmup_steps
    }
}

/// Adam with bias correction. Moments are keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update from already-clipped gradients.
    pub fn step(&mut self, store: &nn::ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var) in store.vars() {
            let Some(g) = grads.get(name) else { continue };
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let g2 = g.sqr()?;
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g2 * (1.0 - self.beta2))?)?,
                None => (g2 * (1.0 - self.beta2))?,
            };
            let m_hat = (&m / bc1)?;
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = (m_hat.div(&denom)? * lr)?;
            let p = var.as_tensor().detach();
            var.set(&(p - update)?)?;
            self.m.insert(name.clone(), m.detach());
            self.v.insert(name.clone(), v.detach());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        for (k, t) in &self.m {
            tensors.push((format!("m.{k}"), t.clone()));
        }
        for (k, t) in &self.v {
            tensors.push((format!("v.{k}"), t.clone()));
        }
        nn::save_tensors(path, tensors)
    }

    pub fn load_moments(&mut self, path: &Path) -> Result<()> {
        self.m.clear();
        self.v.clear();
        for (k, t) in nn::load_tensors(path)? {
            if let Some(name) = k.strip_prefix("m.") {
                self.m.insert(name.to_string(), t);
            } else if let Some(name) = k.strip_prefix("v.") {
                self.v.insert(name.to_string(), t);
            } else {
                return Err(Error::validation(format!("{}: unexpected tensor '{k}'", path.display())));
            }
        }
        Ok(())
    }
}

/// Everything besides parameters and optimizer moments needed to continue
/// a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    pub total_steps: usize,
    pub adam_t: u64,
    pub rng: ChaCha8Rng,
    pub best_val_loss: Option<f64>,
}

/// One utterance ready for training: raw features for the style path,
/// normalized-and-quantized features for the content path, and the mel
/// target, all frame-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub id: String,
    pub raw: Array2<f32>,
    pub quantized: Array2<f32>,
    pub mel: Array2<f32>,
}

impl TrainItem {
    pub fn n_frames(&self) -> usize {
        self.raw.nrows()
    }

    fn crop(&self, start: usize, len: usize) -> (ndarray::ArrayView2<'_, f32>, ndarray::ArrayView2<'_, f32>, ndarray::ArrayView2<'_, f32>) {
        let r = start..start + len;
        (
            self.raw.slice(s![r.clone(), ..]),
            self.quantized.slice(s![r.clone(), ..]),
            self.mel.slice(s![r, ..]),
        )
    }
}

/// Encode, quantize (training-set statistics) and compute the mel target
/// for one waveform.
pub fn prepare_item(
    id: &str,
    w: &Waveform,
    backend: &dyn SpeechEncoderBackend,
    quantizer: &Quantizer,
    mel: &MelExtractor,
) -> Result<TrainItem> {
    let raw = encode(w, backend, id)?;
    let quantized = quantizer.apply(&raw, None)?;
    let target = mel.melspec(w)?;
    let t = raw.n_frames().min(target.n_frames());
    Ok(TrainItem {
        id: id.to_string(),
        raw: raw.vectors.slice(s![..t, ..]).to_owned(),
        quantized: quantized.vectors.slice(s![..t, ..]).to_owned(),
        mel: target.frames.slice(s![..t, ..]).to_owned(),
    })
}

pub fn prepare_items(
    manifest: &Manifest,
    backend: &dyn SpeechEncoderBackend,
    quantizer: &Quantizer,
    mel: &MelExtractor,
) -> Result<Vec<TrainItem>> {
    let rate = mel.config().sample_rate;
    manifest
        .records
        .par_iter()
        .map(|r| prepare_item(&r.id, &manifest.load_waveform(r, rate)?, backend, quantizer, mel))
        .collect()
}

/// Quantizer from a checkpoint directory, or a configuration error telling
/// the user to fit one.
pub fn require_quantizer(dir: &Path) -> Result<Quantizer> {
    if !Quantizer::exists_in(dir) {
        return Err(Error::config(format!(
            "no codebook/stats in {}; run `vcaug fit-quantizer` first",
            dir.display()
        )));
    }
    Quantizer::load(dir)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub epoch: usize,
    pub l2: f64,
    pub pre_postnet_l2: f64,
    pub attention: f64,
    pub stop: f64,
    pub total: f64,
    pub lr: f64,
    pub crop_base_s: f64,
    pub crop_s: f64,
    pub grad_norm: f64,
    pub clipped_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub step: usize,
    pub epoch: usize,
    pub val_l2: f64,
    pub val_stop: f64,
    pub val_loss: f64,
    pub best: bool,
}

pub struct Trainer {
    pub model: VcModel,
    pub optimizer: Adam,
    pub state: TrainState,
    pub cfg: TrainConfig,
    pub schedule: OneCycle,
    pub steps_per_epoch: usize,
}

fn stack(views: &[ndarray::ArrayView2<'_, f32>], model: &VcModel) -> Result<Tensor> {
    let (t, d) = views[0].dim();
    let mut flat = Vec::with_capacity(views.len() * t * d);
    for v in views {
        flat.extend(v.iter().copied());
    }
    Ok(Tensor::from_vec(flat, (views.len(), t, d), model.store.device())?.to_dtype(model.store.dtype())?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn global_norm(grads: &BTreeMap<String, Tensor>) -> Result<f64> {
    // Accumulate in f64: an f32 sum over every parameter drifts by a few
    // parts per million, enough to breach the clip bound.
    let mut sq = 0.0;
    for g in grads.values() {
        sq += scalar(&g.to_dtype(DType::F64)?.sqr()?.sum_all()?)?;
    }
    Ok(sq.sqrt())
}

impl Trainer {
    pub fn new(model: VcModel, cfg: &TrainConfig, n_train: usize) -> Result<Self> {
        cfg.validate()?;
        if n_train == 0 {
            return Err(Error::validation("training set is empty"));
        }
        let total_steps = cfg.total_steps(n_train);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            model,
            optimizer: Adam::new(cfg),
            state: TrainState {
                step: 0,
                epoch: 0,
                total_steps,
                adam_t: 0,
                rng,
                best_val_loss: None,
            },
            cfg: cfg.clone(),
            schedule: OneCycle::new(cfg, total_steps),
            steps_per_epoch: cfg.steps_per_epoch(n_train),
        })
    }

    /// Utterance indices of every batch in `epoch`; a pure function of the
    /// seed and epoch so a resumed run sees the same order.
    pub fn epoch_batches(&self, epoch: usize, n: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Minimum crop in frames: the reference encoder rejects shorter input.
    pub fn min_crop_frames(&self) -> usize {
        self.model.min_reference_frames().max(self.model.content.min_frames())
    }

    /// Forward, backward, clip and update on one batch. Each utterance gets
    /// one crop shared by the style input, the content input and the target.
    pub fn train_step(&mut self, batch: &[&TrainItem]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::validation("empty training batch"));
        }
        let step = self.state.step;
        let hop_s = crate::features::FEATURE_HOP_S;
        let base = crop_base_s(step, self.state.total_steps, &self.cfg);
        let crop_s = crop_schedule(step, self.state.total_steps, &self.cfg, &mut self.state.rng);
        let crop_frames = ((crop_s / hop_s).round() as usize).max(self.min_crop_frames());

        let mut groups: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
        for (i, item) in batch.iter().enumerate() {
            let t = item.n_frames();
            if t < self.min_crop_frames() {
                return Err(Error::validation(format!(
                    "utterance '{}' has {t} frames; training needs at least {}",
                    item.id,
                    self.min_crop_frames()
                )));
            }
            let (start, len) = if t > crop_frames {
                (self.state.rng.random_range(0..=t - crop_frames), crop_frames)
            } else {
                (0, t)
            };
            groups.entry(len).or_default().push((i, start));
        }

        let n = batch.len() as f64;
        let mut total: Option<Tensor> = None;
        let mut values = ReconstructionLoss::default();
        for (len, members) in &groups {
            let crops: Vec<_> = members.iter().map(|&(i, start)| batch[i].crop(start, *len)).collect();
            let raw = stack(&crops.iter().map(|c| c.0).collect::<Vec<_>>(), &self.model)?;
            let quant = stack(&crops.iter().map(|c| c.1).collect::<Vec<_>>(), &self.model)?;
            let mel = stack(&crops.iter().map(|c| c.2).collect::<Vec<_>>(), &self.model)?;
            let pass = self.model.forward_teacher(&raw, &quant, &mel, Some(&mut self.state.rng))?;
            let w = members.len() as f64 / n;
            values.l2_term += w * pass.values.l2_term;
            values.pre_postnet_l2 += w * pass.values.pre_postnet_l2;
            values.attention_term += w * pass.values.attention_term;
            values.stop_term += w * pass.values.stop_term;
            values.total += w * pass.values.total;
            let weighted = (pass.loss * w)?;
            total = Some(match total {
                Some(t) => (t + weighted)?,
                None => weighted,
            });
        }
        let total = total.expect("nonempty batch has at least one group");
        if !values.total.is_finite() {
            let ids: Vec<&str> = batch.iter().map(|b| b.id.as_str()).collect();
            return Err(Error::Numerical(format!(
                "non-finite loss at step {step} (l2 {}, stop {}); batch ids: {ids:?}",
                values.l2_term, values.stop_term
            )));
        }

        let grad_store: GradStore = total.backward()?;
        let mut grads = BTreeMap::new();
        for (name, var) in self.model.store.vars() {
            if let Some(g) = grad_store.get(var.as_tensor()) {
                // Accumulated parameter gradients can still carry graph
                // history; keeping it would chain every step's graph
                // through the Adam moments.
                grads.insert(name.clone(), g.detach());
            }
        }
        let grad_norm = global_norm(&grads)?;
        if !grad_norm.is_finite() {
            let ids: Vec<&str> = batch.iter().map(|b| b.id.as_str()).collect();
            return Err(Error::Numerical(format!(
                "non-finite gradient norm at step {step}; batch ids: {ids:?}"
            )));
        }
        if grad_norm > self.cfg.grad_clip_norm {
            let scale = self.cfg.grad_clip_norm / grad_norm;
            for g in grads.values_mut() {
                *g = (&*g * scale)?;
            }
        }
        let clipped_grad_norm = global_norm(&grads)?;
        let lr = self.schedule.lr(step);
        self.optimizer.step(&self.model.store, &grads, lr)?;

        let report = StepReport {
            step,
            epoch: self.state.epoch,
            l2: values.l2_term,
            pre_postnet_l2: values.pre_postnet_l2,
            attention: values.attention_term,
            stop: values.stop_term,
            total: values.total,
            lr,
            crop_base_s: base,
            crop_s,
            grad_norm,
            clipped_grad_norm,
        };
        self.state.step += 1;
        self.state.epoch = self.state.step / self.steps_per_epoch;
        self.state.adam_t = self.optimizer.t;
        Ok(report)
    }

    /// Teacher-forced loss on centered crops of at most
    /// `validation_crop_s`, averaged over utterances. No dropout.
    pub fn evaluate(&self, items: &[TrainItem]) -> Result<ReconstructionLoss> {
        evaluate(&self.model, items, self.cfg.validation_crop_s)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.save(&dir.join(MODEL_FILE))?;
        self.optimizer.save(&dir.join(OPTIMIZER_FILE))?;
        checkpoint::write_json_atomic(&dir.join(TRAIN_STATE_FILE), &self.state)
    }

    /// Rebuild a trainer from a directory written by [`Trainer::save`].
    pub fn resume(dir: &Path, model_cfg: &ModelConfig, cfg: &TrainConfig, n_train: usize) -> Result<Self> {
        let model = VcModel::load(model_cfg, &dir.join(MODEL_FILE))?;
        let mut trainer = Self::new(model, cfg, n_train)?;
        let state: TrainState = checkpoint::read_json(&dir.join(TRAIN_STATE_FILE))?;
        if state.total_steps != trainer.state.total_steps {
            return Err(Error::config(format!(
                "checkpoint was written for {} total steps but this configuration gives {}",
                state.total_steps, trainer.state.total_steps
            )));
        }
        trainer.optimizer.load_moments(&dir.join(OPTIMIZER_FILE))?;
        trainer.optimizer.t = state.adam_t;
        trainer.state = state;
        Ok(trainer)
    }

    /// Train until the schedule ends or `stop_after` more steps have run.
    /// Validates and checkpoints at every epoch end (and into `best/` on
    /// improvement); also checkpoints when stopping early.
    pub fn run(
        &mut self,
        train: &[TrainItem],
        val: &[TrainItem],
        ckpt_dir: Option<&Path>,
        mut log: Option<&mut dyn Write>,
        stop_after: Option<usize>,
    ) -> Result<Vec<StepReport>> {
        let mut reports = Vec::new();
        let end = match stop_after {
            Some(k) => (self.state.step + k).min(self.state.total_steps),
            None => self.state.total_steps,
        };
        while self.state.step < end {
            let epoch = self.state.step / self.steps_per_epoch;
            let b = self.state.step % self.steps_per_epoch;
            let batches = self.epoch_batches(epoch, train.len());
            let batch: Vec<&TrainItem> = batches[b].iter().map(|&i| &train[i]).collect();
            let report = self.train_step(&batch)?;
            tracing::debug!(step = report.step, loss = report.total, lr = report.lr, "train step");
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", serde_json::to_string(&report)?).map_err(|e| Error::io("<train log>", e))?;
            }
            reports.push(report);

            if b + 1 == self.steps_per_epoch {
                let mut best = false;
                if !val.is_empty() {
                    let v = self.evaluate(val)?;
                    best = self.state.best_val_loss.is_none_or(|prev| v.total < prev);
                    if best {
                        self.state.best_val_loss = Some(v.total);
                    }
                    let vr = ValidationReport {
                        step: self.state.step,
                        epoch,
                        val_l2: v.l2_term,
                        val_stop: v.stop_term,
                        val_loss: v.total,
                        best,
                    };
                    tracing::info!(epoch, val_loss = v.total, best, "validation");
                    if let Some(w) = log.as_deref_mut() {
                        writeln!(w, "{}", serde_json::to_string(&vr)?).map_err(|e| Error::io("<train log>", e))?;
                    }
                }
                if let Some(dir) = ckpt_dir {
                    self.save(dir)?;
                    if best {
                        self.save(&dir.join(BEST_DIR))?;
                    }
                }
            }
        }
        if let Some(dir) = ckpt_dir {
            self.save(dir)?;
        }
        Ok(reports)
    }
}

/// Teacher-forced loss of `model` on centered crops, averaged over items.
pub fn evaluate(model: &VcModel, items: &[TrainItem], crop_s: f64) -> Result<ReconstructionLoss> {
    if items.is_empty() {
        return Err(Error::validation("no utterances to evaluate"));
    }
    let max_frames = (crop_s / crate::features::FEATURE_HOP_S).round() as usize;
    let mut acc = ReconstructionLoss::default();
    for item in items {
        let t = item.n_frames();
        let len = t.min(max_frames.max(model.min_reference_frames()));
        let (raw, quant, mel) = item.crop((t - len) / 2, len);
        let pass = model.forward_teacher(&stack(&[raw], model)?, &stack(&[quant], model)?, &stack(&[mel], model)?, None)?;
        acc.l2_term += pass.values.l2_term;
        acc.pre_postnet_l2 += pass.values.pre_postnet_l2;
        acc.attention_term += pass.values.attention_term;
        acc.stop_term += pass.values.stop_term;
        acc.total += pass.values.total;
    }
    let n = items.len() as f64;
    Ok(ReconstructionLoss {
        l2_term: acc.l2_term / n,
        pre_postnet_l2: acc.pre_postnet_l2 / n,
        attention_term: acc.attention_term / n,
        stop_term: acc.stop_term / n,
        total: acc.total / n,
    })
}

/// Inputs shared by [`fit`].
pub struct FitContext<'a> {
    pub backend: &'a dyn SpeechEncoderBackend,
    pub mel: &'a MelExtractor,
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
}

/// Train from manifests into `ckpt_dir`, which must already hold the
/// quantizer. With `resume`, continue from the state saved there.
pub fn fit(
    train_manifest: &Manifest,
    val_manifest: &Manifest,
    ctx: &FitContext<'_>,
    ckpt_dir: &Path,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<TrainState> {
    let quantizer = require_quantizer(ckpt_dir)?;
    let mut train = prepare_items(train_manifest, ctx.backend, &quantizer, ctx.mel)?;
    let val = prepare_items(val_manifest, ctx.backend, &quantizer, ctx.mel)?;

    let model = VcModel::new(ctx.model, DType::F32)?;
    let min = model.min_reference_frames();
    let before = train.len();
    train.retain(|item| item.n_frames() >= min);
    if train.len() < before {
        tracing::warn!(
            dropped = before - train.len(),
            min_frames = min,
            "skipping training utterances shorter than the reference encoder minimum"
        );
    }
    if train.is_empty() {
        return Err(Error::validation(format!(
            "no training utterance has the {min} frames the reference encoder needs"
        )));
    }

    let resuming = resume && ckpt_dir.join(TRAIN_STATE_FILE).is_file();
    let mut trainer = if resuming {
        Trainer::resume(ckpt_dir, ctx.model, ctx.train, train.len())?
    } else {
        Trainer::new(model, ctx.train, train.len())?
    };
    let log_path = ckpt_dir.join(LOG_FILE);
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(resuming)
        .write(true)
        .truncate(!resuming)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    trainer.run(&train, &val, Some(ckpt_dir), Some(&mut log), stop_after)?;
    Ok(trainer.state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_base_endpoints_and_midpoint() {
        let cfg = TrainConfig::default();
        assert_eq!(crop_base_s(0, 1000, &cfg), 0.6);
        assert_eq!(crop_base_s(1000, 1000, &cfg), 10.2);
        assert!((crop_base_s(500, 1000, &cfg) - 5.4).abs() < 1e-12);
    }

    #[test]
    fn crop_samples_stay_in_band() {
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let c = crop_schedule(0, 10, &cfg, &mut rng);
            assert!((0.48..=0.72).contains(&c));
            let c = crop_schedule(10, 10, &cfg, &mut rng);
            assert!((8.16..=12.24 + 1e-12).contains(&c));
        }
    }

    #[test]
    fn one_cycle_shape() {
        let cfg = TrainConfig::default();
        let sched = OneCycle::new(&cfg, 1000);
        let lrs: Vec<f64> = (0..1000).map(|s| sched.lr(s)).collect();
        let peak = sched.peak_step();
        assert_eq!(lrs[peak], 6e-4);
        assert!((lrs[0] - 6e-4 / 25.0).abs() < 1e-15);
        assert!((lrs[999] - 6e-6).abs() < 1e-15);
        assert!(lrs[..=peak].windows(2).all(|w| w[1] >= w[0]));
        assert!(lrs[peak..].windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn one_cycle_tiny_runs() {
        let cfg = TrainConfig::default();
        for total in 1..5 {
            let sched = OneCycle::new(&cfg, total);
            let peak = (0..total).map(|s| sched.lr(s)).fold(0.0, f64::max);
            assert_eq!(peak, 6e-4);
        }
    }

    #[test]
    fn batching_arithmetic() {
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.steps_per_epoch(8), 1);
        assert_eq!(cfg.total_steps(8), 1);
        assert_eq!(cfg.steps_per_epoch(65), 3);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            crop_start_s: 11.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            crop_jitter: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn missing_quantizer_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = require_quantizer(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("fit-quantizer"));
    }
}
