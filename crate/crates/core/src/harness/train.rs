use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::batch::{chunks, patch_batch, seg_batch};
use super::optim::{cosine_lr, Adam, AdamConfig};
use super::report::{monitor_value, EvalReport};
use crate::data::PatchSample;
use crate::error::{Error, Result};
use crate::mae::{pretrain_step, MaskedAutoencoder, PretrainBatch};
use crate::metrics::{confusion, ConfusionMatrix};
use crate::nn::ParamStore;
use crate::numerics::Tape;
use crate::seg::{augment, LossKind, Monitor, SegBatch, SegmentationModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub loss_kind: LossKind,
    pub class_weights: (f64, f64),
    pub augment: bool,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub max_epochs: usize,
    pub monitor: Monitor,
    /// Scheduler horizon in steps; `None` means `max_epochs · steps_per_epoch`.
    pub horizon: Option<usize>,
    pub adam: AdamConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            loss_kind: LossKind::WeightedCe,
            class_weights: (1.0, 1.0),
            augment: false,
            batch_size: 64,
            lr: 1e-4,
            lr_min: 0.0,
            max_epochs: 150,
            monitor: Monitor::BalancedAccuracy,
            horizon: None,
            adam: AdamConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.monitor != self.loss_kind.monitor() {
            return Err(Error::invalid(format!("{:?} must be monitored with {:?}", self.loss_kind, self.loss_kind.monitor())));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("batch_size and max_epochs must be positive"));
        }
        Ok(())
    }

    pub fn horizon_for(&self, n_train: usize) -> usize {
        self.horizon.unwrap_or(self.max_epochs * n_train.div_ceil(self.batch_size)).max(1)
    }
}

/// Keeps the best monitored value; ties keep the earlier epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointSelector {
    pub best: Option<(usize, f64)>,
}

impl CheckpointSelector {
    /// True when `value` becomes the new best.
    pub fn offer(&mut self, epoch: usize, value: f64) -> bool {
        match self.best {
            Some((_, b)) if value <= b => false,
            _ => {
                self.best = Some((epoch, value));
                true
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    pub monitor: f64,
    pub metrics: std::collections::BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    /// One JSON object per epoch, newline-terminated.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub best_params: ParamStore,
    pub best_epoch: usize,
    pub best_value: f64,
    pub history: History,
}

/// Forward, backward and one optimizer update; returns the pre-update loss.
pub fn finetune_step(model: &mut SegmentationModel, batch: &SegBatch, opt: &mut Adam, lr: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let loss = model.loss_on(&mut tape, &p, batch)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("fine-tuning loss {value}")));
    }
    tape.backward(loss)?;
    model.params.zero_grad();
    model.params.collect_grads(&tape, &p);
    opt.step(&mut model.params, lr)?;
    Ok(value)
}

/// Micro-averaged confusion of the model's predictions over `samples`.
pub fn confusion_over(model: &SegmentationModel, samples: &[PatchSample], batch_size: usize) -> Result<ConfusionMatrix> {
    let order: Vec<usize> = (0..samples.len()).collect();
    let parts: Vec<Result<ConfusionMatrix>> = order
        .par_chunks(batch_size.max(1))
        .map(|idx| {
            let b = seg_batch(samples, idx)?;
            let pred = model.predict(&b.batch)?;
            confusion(&pred, &b.targets)
        })
        .collect();
    parts.into_iter().try_fold(ConfusionMatrix::default(), |acc, cm| Ok(acc + cm?))
}

pub fn evaluate(model: &SegmentationModel, samples: &[PatchSample], batch_size: usize) -> Result<EvalReport> {
    EvalReport::from_confusion(confusion_over(model, samples, batch_size)?)
}

/// Trains for `max_epochs` and keeps the parameters with the best monitored
/// validation value.
pub fn fit(run: &RunConfig, model: &mut SegmentationModel, train: &[PatchSample], val: &[PatchSample]) -> Result<FitResult> {
    run.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    model.seg_cfg.loss_kind = run.loss_kind;
    model.seg_cfg.monitor = run.monitor;
    model.seg_cfg.class_weights = run.class_weights;
    model.seg_cfg.validate(&model.model_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut opt = Adam::new(&model.params, run.adam);
    let horizon = run.horizon_for(train.len());
    let mut step = 0usize;
    let mut selector = CheckpointSelector::default();
    let mut best_params = model.params.clone();
    let mut history = History::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=run.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut n) = (0.0, 0usize);
        let mut lr = run.lr;
        for idx in chunks(&order, run.batch_size) {
            let mut batch = seg_batch(train, idx)?;
            if run.augment {
                batch = augment(&batch, &mut rng)?;
            }
            lr = cosine_lr(step.min(horizon), horizon, run.lr, run.lr_min)?;
            loss_sum += finetune_step(model, &batch, &mut opt, lr)? * idx.len() as f64;
            n += idx.len();
            step += 1;
        }
        let cm = confusion_over(model, val, run.batch_size)?;
        let value = monitor_value(&cm, run.monitor)
            .map_err(|e| Error::UndefinedMetric(format!("epoch {epoch} validation monitor: {e}")))?;
        let metrics = EvalReport::from_confusion(cm).map(|r| r.metrics).unwrap_or_default();
        if selector.offer(epoch, value) {
            best_params = model.params.clone();
        }
        history.records.push(EpochRecord { epoch, train_loss: loss_sum / n as f64, lr, monitor: value, metrics });
    }
    let (best_epoch, best_value) = selector.best.expect("at least one epoch");
    Ok(FitResult { best_params, best_epoch, best_value, history })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainRun {
    pub seed: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub epochs: usize,
    /// Stops after this many updates when set.
    pub max_steps: Option<usize>,
    pub adam: AdamConfig,
}

impl Default for PretrainRun {
    fn default() -> Self {
        PretrainRun { seed: 0, batch_size: 64, lr: 1e-4, lr_min: 0.0, epochs: 150, max_steps: None, adam: AdamConfig::default() }
    }
}

/// Masked-reconstruction training; returns the loss of every step.
pub fn pretrain(run: &PretrainRun, model: &mut MaskedAutoencoder, samples: &[PatchSample]) -> Result<Vec<f64>> {
    if samples.is_empty() || run.batch_size == 0 {
        return Err(Error::invalid("pretraining needs samples and a positive batch size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut opt = Adam::new(&model.params, run.adam);
    let per_epoch = samples.len().div_ceil(run.batch_size);
    let horizon = run.max_steps.unwrap_or(run.epochs * per_epoch).max(1);
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    'outer: for _ in 0..run.epochs.max(1) {
        order.shuffle(&mut rng);
        for idx in chunks(&order, run.batch_size) {
            if losses.len() >= horizon {
                break 'outer;
            }
            let batch = PretrainBatch::sample(patch_batch(samples, idx)?, &model.cfg, &mut rng);
            let lr = cosine_lr(losses.len(), horizon, run.lr, run.lr_min)?;
            losses.push(pretrain_step(model, &batch, &mut opt, lr)?);
        }
        if run.max_steps.is_none() && losses.len() >= run.epochs * per_epoch {
            break;
        }
    }
    Ok(losses)
}
