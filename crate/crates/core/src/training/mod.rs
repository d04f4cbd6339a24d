//! Training objectives and the minibatch SGD loop that optimizes them.

mod objective;
mod sink;

pub use objective::{
    distortion_term, loss_adversarial, loss_distortion_regularized, loss_standard, objective_loss, objective_value,
    DistortionReduction, DistortionTerm, ObjectiveConfig, ObjectiveKind, ObjectiveTerms,
};
pub use sink::{CsvSink, MemorySink, MetricRecord, MetricsSink, NullSink};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::DatasetHandle;
use crate::error::{Error, Result};
use crate::nn::{save_checkpoint, Model};
use crate::optim::Sgd;
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f32,
    #[serde(default = "defaults::momentum")]
    pub momentum: f32,
    /// Seed of the per-epoch shuffling stream.
    #[serde(default)]
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 disables intermediate checkpoints.
    #[serde(default)]
    pub checkpoint_every: usize,
}

mod defaults {
    pub fn epochs() -> usize {
        10
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn learning_rate() -> f32 {
        0.01
    }
    pub fn momentum() -> f32 {
        0.9
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            learning_rate: defaults::learning_rate(),
            momentum: defaults::momentum(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", format!("must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", format!("{} not in [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total objective over the epoch's batches.
    pub loss: f64,
    pub clean_loss: f64,
    /// Fraction of training examples classified correctly by the train-mode clean pass.
    pub train_accuracy: f64,
    /// Per-layer mean of the unweighted distortion sums, for the regularized objective.
    pub distortion: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

/// Trains `model` in place and returns the per-epoch history.
///
/// Each step runs the objective on one batch, applies one SGD update and
/// then folds the clean pass's batch statistics into the running statistics.
/// With `checkpoint_dir` set and a nonzero `checkpoint_every`, writes
/// `epoch-{n}.ckpt` on that cadence.
pub fn train(
    model: &mut Model,
    data: &DatasetHandle,
    objective: &ObjectiveConfig,
    tc: &TrainConfig,
    sink: &mut dyn MetricsSink,
    checkpoint_dir: Option<&Path>,
) -> Result<History> {
    tc.validate()?;
    objective.validate(model.normalization_layer_count())?;
    if let Some(a) = &objective.attack {
        let (lo, hi) = data.kind.clip_range();
        if objective.kind != ObjectiveKind::Standard && (a.clip_min != lo || a.clip_max != hi) {
            return Err(Error::config(
                "objective.attack.clip_min",
                format!("clip range [{}, {}] does not match {} pixels in [{lo}, {hi}]", a.clip_min, a.clip_max, data.kind.name()),
            ));
        }
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }

    let mut shuffle = RngStream::new(tc.seed);
    let mut sgd = Sgd::new(tc.learning_rate, tc.momentum);
    let mut tape = Tape::new();
    let mut history = History::default();

    for epoch in 1..=tc.epochs {
        let (mut loss_sum, mut clean_sum, mut correct, mut seen, mut batches) = (0.0f64, 0.0f64, 0usize, 0usize, 0usize);
        let mut distortion_sum: Option<Vec<f64>> = None;
        for (b, batch) in data.batches(tc.batch_size, true, &mut shuffle)?.enumerate() {
            tape.clear();
            let bound = model.bind(&mut tape, true);
            let terms = objective_loss(model, &mut tape, &bound, &batch, objective)?;
            let total = terms.total_value(&tape);
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    clean: terms.clean_loss,
                    adversarial: terms.adversarial_loss,
                    distortion: terms.distortion.clone(),
                });
            }
            let predictions = tape.value(terms.clean_logits).argmax_rows();
            correct += predictions.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
            seen += batch.len();
            loss_sum += total as f64;
            clean_sum += terms.clean_loss as f64;
            batches += 1;
            if let Some(d) = &terms.distortion {
                let acc = distortion_sum.get_or_insert_with(|| vec![0.0; d.len()]);
                for (a, &v) in acc.iter_mut().zip(d) {
                    *a += v as f64;
                }
            }

            tape.backward(terms.total)?;
            let grads: Vec<Option<&[f32]>> = bound.vars().iter().map(|&v| tape.grad_data(v)).collect();
            let mut params: Vec<&mut crate::tensor::Tensor> =
                model.params_mut().iter_mut().map(|p| &mut p.tensor).collect();
            sgd.step(&mut params, &grads);
            model.commit_stats(&terms.clean_stats)?;
        }

        let record = EpochRecord {
            epoch,
            loss: loss_sum / batches as f64,
            clean_loss: clean_sum / batches as f64,
            train_accuracy: correct as f64 / seen as f64,
            distortion: distortion_sum.map(|d| d.into_iter().map(|v| v / batches as f64).collect()),
        };
        sink.record(MetricRecord::new(epoch, "train", "loss", record.loss))?;
        sink.record(MetricRecord::new(epoch, "train", "clean_loss", record.clean_loss))?;
        sink.record(MetricRecord::new(epoch, "train", "accuracy", record.train_accuracy))?;
        if let Some(d) = &record.distortion {
            for (i, v) in d.iter().enumerate() {
                sink.record(MetricRecord::new(epoch, "train", &format!("distortion_{i}"), *v))?;
            }
        }
        history.epochs.push(record);

        if let Some(dir) = checkpoint_dir {
            if tc.checkpoint_every > 0 && epoch % tc.checkpoint_every == 0 {
                model.metadata.insert("epoch".into(), epoch.to_string());
                save_checkpoint(model, &dir.join(format!("epoch-{epoch}.ckpt")))?;
            }
        }
    }
    model.metadata.insert("epoch".into(), tc.epochs.to_string());
    model.metadata.insert("objective".into(), objective.kind.name().to_string());
    Ok(history)
}
