//! Deterministic mini-batch sampling and baseline (vanilla) training.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::Tape;
use crate::corrupt::derive_seed;
use crate::data::Dataset;
use crate::model::{build_camnet, CamNet, ModelError, Trainable, WidthConfig};
use crate::optim::{sgd_step, SgdState};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("loss became non-finite ({loss}) at step {step}")]
    NonFinite { step: usize, loss: f64 },
    #[error("dataset has {dataset} classes but the model has {model}")]
    ClassMismatch { dataset: usize, model: usize },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Epoch-wise shuffled batches. Batch `s` is a pure function of
/// `(seed, s)`; every image appears once per epoch, and a trailing partial
/// batch is dropped.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    len: usize,
    batch: usize,
    seed: u64,
    cached_epoch: Option<(usize, Vec<usize>)>,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 || batch > len {
            return Err(TrainError::Config(format!(
                "batch size {batch} must be between 1 and the dataset size {len}"
            )));
        }
        Ok(Self {
            len,
            batch,
            seed,
            cached_epoch: None,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len / self.batch
    }

    fn permutation(&mut self, epoch: usize) -> &[usize] {
        if self.cached_epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.len).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, 0xBA7C, epoch as u64]));
            order.shuffle(&mut rng);
            self.cached_epoch = Some((epoch, order));
        }
        &self.cached_epoch.as_ref().expect("just filled").1
    }

    pub fn batch(&mut self, step: usize) -> Vec<usize> {
        let per = self.batches_per_epoch();
        let (epoch, pos) = (step / per, step % per);
        let b = self.batch;
        self.permutation(epoch)[pos * b..(pos + 1) * b].to_vec()
    }
}

/// Baseline training settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    /// Cosine decay from `learning_rate` to `learning_rate * final_lr_fraction`.
    pub final_lr_fraction: f32,
    /// Linear warm-up from zero over this many epochs (may be fractional).
    pub warmup_epochs: f32,
    pub weight_decay: f32,
    /// Joint gradient-norm bound per step; zero disables clipping.
    pub max_grad_norm: f32,
    pub seed: u64,
    pub width: WidthConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 64,
            learning_rate: 0.02,
            momentum: 0.9,
            final_lr_fraction: 0.02,
            warmup_epochs: 1.0,
            weight_decay: 5e-4,
            max_grad_norm: 2.0,
            seed: 1,
            width: WidthConfig::desk(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::Config(format!("weight_decay {} must be >= 0", self.weight_decay)));
        }
        if !(self.max_grad_norm >= 0.0 && self.max_grad_norm.is_finite()) {
            return Err(TrainError::Config(format!("max_grad_norm {} must be >= 0", self.max_grad_norm)));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs <= self.epochs as f32) {
            return Err(TrainError::Config("warmup_epochs must lie in [0, epochs]".into()));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(TrainError::Config("final_lr_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Learning rate of step `step` out of `total` (over all epochs).
    pub fn lr_at(&self, step: usize, total: usize) -> f32 {
        let total = total.max(1) as f64;
        let warmup = (self.warmup_epochs as f64 / self.epochs as f64 * total).round();
        let step = step as f64;
        if step < warmup {
            return (self.learning_rate as f64 * (step + 1.0) / warmup) as f32;
        }
        let progress = (step - warmup) / (total - warmup).max(1.0);
        let floor = self.final_lr_fraction as f64;
        let factor = floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        (self.learning_rate as f64 * factor) as f32
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_error: f64,
    pub elapsed_ms: u128,
}

/// One SGD step of mean softmax cross-entropy on all parameters; returns
/// the loss and the number of misclassified images.
pub fn cross_entropy_step(
    model: &mut CamNet<f32>,
    inputs: &Tensor<f32>,
    labels: &[usize],
    opt: &mut SgdState<f32>,
) -> Result<(f32, usize)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Trainable::All);
    let x = tape.constant(inputs.clone());
    let (logits, _) = model.forward_on_tape(&mut tape, &bound, x)?;
    let wrong = count_wrong(tape.value(logits), labels);
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let value = tape.value(loss).item()?;
    tape.backward(loss)?;
    model.absorb_grads(&mut tape, &bound)?;
    let names: Vec<String> = model.named_params().map(|(n, _)| n.to_string()).collect();
    sgd_step(&mut model.params_mut(&names), opt)?;
    Ok((value, wrong))
}

/// Misclassified rows of a `[B, classes]` logit tensor (argmax, ties to the
/// lower class id).
pub fn count_wrong(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &label)| crate::cam::top_k(row, 1)[0] != label)
        .count()
}

/// Trains a fresh network on `data` from `cfg.seed`.
pub fn train_baseline(
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(CamNet<f32>, Vec<EpochRecord>)> {
    cfg.validate()?;
    let mut model = build_camnet(data.input_shape(), data.classes(), cfg.width.clone(), cfg.seed)?;
    let mut sampler = BatchSampler::new(data.len(), cfg.batch_size, cfg.seed)?;
    let per_epoch = sampler.batches_per_epoch();
    let total = per_epoch * cfg.epochs;
    let mut opt = SgdState::new(cfg.learning_rate, cfg.momentum)?.with_weight_decay(cfg.weight_decay)?;
    if cfg.max_grad_norm > 0.0 {
        opt = opt.with_max_grad_norm(cfg.max_grad_norm)?;
    }
    let start = Instant::now();
    let mut records = Vec::new();
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut wrong) = (0.0f64, 0usize);
        for pos in 0..per_epoch {
            let step = epoch * per_epoch + pos;
            opt.learning_rate = cfg.lr_at(step, total);
            let (inputs, labels) = data.batch(&sampler.batch(step));
            let (loss, w) = cross_entropy_step(&mut model, &inputs, &labels, &mut opt)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    loss: loss as f64,
                });
            }
            loss_sum += loss as f64;
            wrong += w;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            mean_loss: loss_sum / per_epoch as f64,
            train_error: wrong as f64 / (per_epoch * cfg.batch_size) as f64,
            elapsed_ms: start.elapsed().as_millis(),
        };
        on_epoch(&record);
        records.push(record);
    }
    Ok((model, records))
}
