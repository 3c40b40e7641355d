//! Mini-batch training with Adam, plateau schedule, early stopping and
//! per-epoch evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{augment, sample_rng, AugmentConfig, Sample};
use crate::error::{Error, Result};
use crate::metrics::{dice_loss_var, MetricsReport, DEFAULT_THRESHOLD};
use crate::model::Model;
use crate::optim::{Adam, AdamConfig, EarlyStopper, PlateauConfig, PlateauScheduler};
use crate::tensor::{BnMode, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub min_lr: Option<f64>,
    pub early_stop_patience: usize,
    pub min_delta: f64,
    pub threshold: f64,
    pub augment: bool,
    /// Stop once the eval-mode train dice reaches this value.
    pub target_train_dice: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 2,
            max_epochs: 175,
            lr: 1e-5,
            lr_factor: 0.2,
            lr_patience: 5,
            min_lr: None,
            early_stop_patience: 5,
            min_delta: 0.0,
            threshold: DEFAULT_THRESHOLD,
            augment: true,
            target_train_dice: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::Config("lr factor must be in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("threshold must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Why training ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
    TargetReached,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// Mean mini-batch loss during the epoch.
    pub train_loss: f64,
    /// Eval-mode metrics on the unaugmented training set.
    pub train: MetricsReport,
    pub val: Option<MetricsReport>,
    /// Value the schedule and stopper monitor: mean validation dice loss,
    /// or the training loss without a validation set.
    pub monitored: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stop: StopReason,
}

/// Stacks samples into `(N, 1, H, W)` image and mask batches.
pub fn stack_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (images, masks): (Vec<&Tensor<f32>>, Vec<&Tensor<f32>>) =
        samples.into_iter().map(|s| (&s.image, &s.mask)).unzip();
    Ok((Tensor::stack_batch(&images)?, Tensor::stack_batch(&masks)?))
}

/// Eval-mode probabilities for each sample, one at a time.
pub fn predict_all(model: &Model<f32>, samples: &[Sample]) -> Result<Vec<Tensor<f32>>> {
    samples.iter().map(|s| model.predict(&s.image)).collect()
}

/// Per-image metrics of `model` on `samples`.
pub fn evaluate(model: &Model<f32>, samples: &[Sample], threshold: f64) -> Result<Vec<MetricsReport>> {
    samples
        .iter()
        .map(|s| {
            let p = model.predict(&s.image)?;
            MetricsReport::evaluate(&s.mask, &p, threshold)
        })
        .collect()
}

fn mean_report(model: &Model<f32>, samples: &[Sample], threshold: f64) -> Result<Option<MetricsReport>> {
    Ok(MetricsReport::mean(&evaluate(model, samples, threshold)?))
}

/// One optimizer step on a batch; returns the loss.
pub fn train_step(
    model: &mut Model<f32>,
    adam: &mut Adam<f32>,
    images: Tensor<f32>,
    masks: &Tensor<f32>,
) -> Result<f64> {
    let tape = Tape::new();
    let x = tape.input(images);
    let probs = model.forward(&tape, &x, BnMode::Train)?;
    let loss = dice_loss_var(&tape, &probs, masks)?;
    let value = loss.value().item() as f64;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value}")));
    }
    let grads = tape.backward(&loss)?;
    drop(x);
    drop(probs);
    drop(tape);
    for (id, g) in grads.params().iter() {
        if !g.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for `{}`",
                model.store.name(id)
            )));
        }
    }
    adam.step(model.store.iter_mut(), grads.params())?;
    Ok(value)
}

/// Runs the training loop. `on_epoch` sees every record with the model
/// and optimizer after that epoch (for logging and checkpointing).
pub fn train(
    model: &mut Model<f32>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord, &Model<f32>, &Adam<f32>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    aug.validate()?;
    if train_set.is_empty() {
        return Err(Error::InsufficientSamples {
            requested: 1,
            available: 0,
        });
    }
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let mut sched = PlateauScheduler::new(
        cfg.lr,
        PlateauConfig {
            factor: cfg.lr_factor,
            patience: cfg.lr_patience,
            min_delta: cfg.min_delta,
            min_lr: cfg.min_lr,
        },
    )?;
    let mut stopper = EarlyStopper::new(cfg.early_stop_patience, cfg.min_delta);
    let mut history = Vec::new();
    let mut best_epoch = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
        shuffle_rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut shuffle_rng);

        let lr = adam.lr();
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        let mut rng = sample_rng(seed, epoch as u64, i as u64);
                        augment(&train_set[i], &mut rng, aug)
                    } else {
                        train_set[i].clone()
                    }
                })
                .collect();
            let (images, masks) = stack_samples(&batch)?;
            let loss = train_step(model, &mut adam, images, &masks).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {}: {m}", b + 1)),
                other => other,
            })?;
            loss_sum += loss;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let train = mean_report(model, train_set, cfg.threshold)?.expect("non-empty training set");
        let val = mean_report(model, val_set, cfg.threshold)?;
        let monitored = val.as_ref().map_or(train_loss, |v| v.dice_loss);
        if !monitored.is_finite() {
            return Err(Error::Numeric(format!("epoch {epoch}: monitored loss is {monitored}")));
        }
        let improved = sched.tracker().is_improvement(monitored);
        let new_lr = sched.update(monitored);
        adam.set_lr(new_lr);
        let halt = stopper.update(monitored);
        if improved {
            best_epoch = Some(epoch);
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss,
            train,
            val,
            monitored,
            improved,
        };
        log::info!(
            "epoch {epoch}: loss {train_loss:.5} train dice {:.4}{} lr {lr:.2e}",
            record.train.dice,
            record
                .val
                .map(|v| format!(" val dice {:.4}", v.dice))
                .unwrap_or_default()
        );
        on_epoch(&record, model, &adam)?;
        let reached = cfg.target_train_dice.is_some_and(|t| record.train.dice >= t);
        history.push(record);
        if reached {
            stop = StopReason::TargetReached;
            break;
        }
        if halt {
            stop = StopReason::EarlyStop;
            break;
        }
    }
    Ok(TrainOutcome {
        history,
        best_epoch,
        stop,
    })
}
