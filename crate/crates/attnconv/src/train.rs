//! Deterministic single-threaded training: AdamW with decoupled weight
//! decay, linear warmup into cosine decay, global gradient-norm clipping
//! and label-smoothed cross-entropy.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationVariant;
use crate::autodiff::GradTape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{build_model, forward_classify, AttentionKind, Model, ModelConfig, PositionMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

/// Options kept for config compatibility; none of them affects training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InertOptions {
    pub mixup: Option<f64>,
    pub cutmix: Option<f64>,
    pub random_erasing: Option<f64>,
    pub repeated_aug: Option<bool>,
    pub model_ema: Option<bool>,
    pub drop_path: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub schedule: Schedule,
    pub label_smoothing: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    #[serde(flatten)]
    pub inert: InertOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            lr: 1e-3,
            min_lr: 1e-5,
            weight_decay: 0.05,
            warmup_epochs: 3,
            schedule: Schedule::Cosine,
            label_smoothing: 0.1,
            clip_norm: Some(5.0),
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            inert: InertOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.min_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rates and weight decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label smoothing must lie in [0, 1)".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip norm must be > 0".into()));
            }
        }
        Ok(())
    }

    /// One line per inert option that was set.
    pub fn warnings(&self) -> Vec<String> {
        let i = &self.inert;
        let set = [
            ("mixup", i.mixup.is_some()),
            ("cutmix", i.cutmix.is_some()),
            ("random_erasing", i.random_erasing.is_some()),
            ("repeated_aug", i.repeated_aug.is_some()),
            ("model_ema", i.model_ema.is_some()),
            ("drop_path", i.drop_path.is_some()),
        ];
        set.iter()
            .filter(|(_, on)| *on)
            .map(|(k, _)| format!("warning: option {k} is accepted but has no effect"))
            .collect()
    }

    /// Learning rate at optimizer step `step` of `total` steps.
    pub fn lr_at(&self, step: usize, steps_per_epoch: usize) -> f64 {
        let warm = self.warmup_epochs * steps_per_epoch;
        let total = self.epochs * steps_per_epoch;
        if step < warm {
            return self.lr * (step + 1) as f64 / warm as f64;
        }
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let span = (total - warm).max(1) as f64;
                let t = (step - warm) as f64 / span;
                self.min_lr.min(self.lr) + 0.5 * (self.lr - self.min_lr.min(self.lr)) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub lr: f64,
    /// Seconds since training started; not part of equality.
    pub wall_time: f64,
}

impl PartialEq for EpochRecord {
    fn eq(&self, o: &Self) -> bool {
        self.epoch == o.epoch
            && self.train_loss.to_bits() == o.train_loss.to_bits()
            && self.train_acc.to_bits() == o.train_acc.to_bits()
            && self.val_acc.to_bits() == o.val_acc.to_bits()
            && self.lr.to_bits() == o.lr.to_bits()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

pub const CSV_HEADER: &str = "epoch,train_loss,train_acc,val_acc,lr,wall_time";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{},{:?},{:?},{:?},{:?},{:?}", r.epoch, r.train_loss, r.train_acc, r.val_acc, r.lr, r.wall_time);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CSV_HEADER) {
            return Err(Error::Config(format!("log CSV must start with {CSV_HEADER:?}")));
        }
        let mut records = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Config(format!("malformed log line {}: {line:?}", n + 2));
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |i: usize| f[i].trim().parse::<f64>().map_err(|_| bad());
            records.push(EpochRecord {
                epoch: f[0].trim().parse().map_err(|_| bad())?,
                train_loss: num(1)?,
                train_acc: num(2)?,
                val_acc: num(3)?,
                lr: num(4)?,
                wall_time: num(5)?,
            });
        }
        Ok(TrainLog { records })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Per-parameter AdamW state.
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decay: Vec<bool>,
    step: i32,
}

impl AdamW {
    /// Weight decay applies to matrices only, not to biases, norms,
    /// tokens or position tables.
    pub fn new(model: &Model) -> Self {
        let p = model.params();
        AdamW {
            m: p.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: p.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
            decay: p
                .iter()
                .map(|(n, t)| t.rank() >= 2 && !["cls_token", "pos_embed", "rel_table"].iter().any(|k| n.contains(k)))
                .collect(),
            step: 0,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[Vec<f64>], lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for (k, t) in model.params_mut().tensors_mut().iter_mut().enumerate() {
            let wd = if self.decay[k] { cfg.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((p, &g), mi), vi) in t.data_mut().iter_mut().zip(&grads[k]).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
                *p -= lr * (update + wd * *p);
            }
        }
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best })
}

/// Top-1 accuracy of `model` on `data`, evaluated in fixed-order batches.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk);
        let logits = forward_classify(model, &x)?;
        correct += (0..y.len()).filter(|&i| argmax(logits.row(i)) == y[i]).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains in place. The epoch order is a seeded permutation per epoch and
/// every reduction runs in a fixed order, so equal seeds give bitwise
/// equal logs and parameters.
pub fn train(model: &mut Model, train_set: &Dataset, val_set: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if train_set.image_size() != model.config().image_size || train_set.num_classes() > model.config().num_classes {
        return Err(Error::Config("dataset does not fit the model's input size or class count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(model);
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let start = Instant::now();
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let epoch_lr = cfg.lr_at(step, steps_per_epoch);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train_set.batch(chunk);
            let mut tape = GradTape::new();
            let params = model.bind(&mut tape);
            let xv = tape.constant(x);
            let logits = model.forward_tape(&mut tape, &params, xv)?;
            let loss = tape.cross_entropy(logits, &y, cfg.label_smoothing)?;
            let lval = tape.value(loss).data()[0];
            if !lval.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    last_finite: log.last().map(|r| r.epoch),
                });
            }
            loss_sum += lval * y.len() as f64;
            let lg = tape.value(logits);
            correct += (0..y.len()).filter(|&i| argmax(lg.row(i)) == y[i]).count();
            tape.backward(loss)?;
            let mut grads: Vec<Vec<f64>> = params.vars().iter().map(|&v| tape.grad(v).expect("param grad").to_vec()).collect();
            drop(tape);
            if let Some(c) = cfg.clip_norm {
                clip_grad_norm(&mut grads, c);
            }
            opt.step(model, &grads, cfg.lr_at(step, steps_per_epoch), cfg);
            step += 1;
        }
        let val_acc = match val_set {
            Some(v) => evaluate(model, v, cfg.batch_size)?,
            None => f64::NAN,
        };
        log.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            val_acc,
            lr: epoch_lr,
            wall_time: start.elapsed().as_secs_f64(),
        });
    }
    Ok(log)
}

/// Variant strings accepted by [`ablate`].
pub fn ablation_variants() -> Vec<&'static str> {
    let mut v: Vec<&str> = ActivationVariant::ALL.iter().map(|a| a.encoding()).collect();
    v.push("depthwise");
    v
}

/// Applies a variant string to a base configuration. `depthwise` switches
/// to depth-wise attention with relative position and linear scaling.
pub fn apply_variant(base: &ModelConfig, variant: &str) -> Result<ModelConfig> {
    if variant == "depthwise" {
        return Ok(base
            .clone()
            .with_activation(ActivationVariant::SCALING)
            .with_attention(AttentionKind::Depthwise)
            .with_position(PositionMode::Rel));
    }
    let act: ActivationVariant = variant.parse().map_err(|_| {
        Error::Config(format!(
            "unknown variant {variant:?}; valid: {}",
            ablation_variants().join(", ")
        ))
    })?;
    Ok(base.clone().with_activation(act))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationBundle {
    pub runs: Vec<(String, TrainLog)>,
}

impl AblationBundle {
    /// Columns `epoch,variant,loss,val_acc`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,variant,loss,val_acc\n");
        for (name, log) in &self.runs {
            for r in &log.records {
                let _ = writeln!(s, "{},{},{:?},{:?}", r.epoch, name, r.train_loss, r.val_acc);
            }
        }
        s
    }
}

/// Trains one model per variant from the same seed and data order.
pub fn ablate(variants: &[&str], base: &ModelConfig, train_set: &Dataset, val_set: Option<&Dataset>, cfg: &TrainConfig) -> Result<AblationBundle> {
    let cfgs = variants
        .iter()
        .map(|v| apply_variant(base, v))
        .collect::<Result<Vec<_>>>()?;
    let mut runs = Vec::with_capacity(cfgs.len());
    for (v, mcfg) in variants.iter().zip(cfgs) {
        let mut model = build_model(&mcfg, cfg.seed)?;
        runs.push((v.to_string(), train(&mut model, train_set, val_set, cfg)?));
    }
    Ok(AblationBundle { runs })
}
