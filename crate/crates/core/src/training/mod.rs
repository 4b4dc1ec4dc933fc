//! Mini-batch training, evaluation and checkpoint persistence.

mod checkpoint;
mod source;

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    default_label_map, load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC,
};
pub use source::{DiskPatches, PatchSource, Subset};

use crate::error::{validation_err, Error, Result};
use crate::inference::classify_logits;
use crate::metrics::{evaluate_predictions, MetricsReport};
use crate::numerics::{adam_step, grad, AdamConfig, AdamState, Tape, Tensor};
use crate::seed::{derive_indexed, derive_seed, rng};
use crate::vit::{forward_tape, patchify, ModelParams, ViTConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Evaluate on the optional eval set every this many epochs (and after
    /// the last one). 0 disables evaluation.
    pub eval_every: usize,
    /// Class treated as positive in evaluation metrics.
    pub positive_class: u8,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            shuffle: true,
            eval_every: 1,
            positive_class: crate::ALCL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(validation_err!("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(validation_err!("batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(validation_err!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(validation_err!("betas must lie in [0, 1)"));
        }
        if self.positive_class > 1 {
            return Err(validation_err!("positive class must be 0 or 1"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    /// Accuracy of the train-mode predictions made during the epoch.
    pub train_accuracy: f64,
    pub eval: Option<MetricsReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub training_seconds: f64,
}

impl TrainHistory {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

struct SampleResult {
    loss: f64,
    correct: bool,
    grads: Vec<Tensor<f32>>,
}

fn sample_gradient<S: PatchSource + ?Sized>(
    params: &ModelParams<f32>,
    vit: &ViTConfig,
    source: &S,
    index: usize,
    dropout_seed: u64,
) -> Result<SampleResult> {
    let pixels = source.pixels(index)?;
    let label = source.label(index);
    let tokens = patchify::<f32>(&pixels, vit.image_size, vit.image_size, vit.channels, vit.token_patch_size)?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let tokens = tape.constant(tokens);
    let mut r = rng(dropout_seed);
    let out = forward_tape(&mut tape, &vars, tokens, vit, Some(&mut r))?;
    let loss = tape.cross_entropy(out.logits, label as usize)?;
    // a diverging model may produce NaN logits; the caller reports the loss
    let logits = tape.value(out.logits).data();
    let predicted = (1..logits.len()).fold(0, |best, i| if logits[i] > logits[best] { i } else { best });
    let mut g = grad(&tape, loss)?;
    let grads = vars
        .iter()
        .zip(params.iter())
        .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok(SampleResult {
        loss: tape.value(loss).data()[0] as f64,
        correct: predicted == label as usize,
        grads,
    })
}

fn check_training_set<S: PatchSource + ?Sized>(source: &S) -> Result<()> {
    if source.is_empty() {
        return Err(validation_err!("training set is empty"));
    }
    let mut seen = [false; 2];
    for i in 0..source.len() {
        match source.label(i) {
            l @ (0 | 1) => seen[l as usize] = true,
            l => return Err(validation_err!("patch {i} has label {l}, expected 0 or 1")),
        }
    }
    if !(seen[0] && seen[1]) {
        return Err(validation_err!(
            "training set holds a single class; both 0 and 1 are required"
        ));
    }
    Ok(())
}

/// Trains a fresh model. Batches are processed sample-parallel; gradients
/// are summed in batch order, so results do not depend on thread count.
pub fn train<S, E>(
    train_set: &S,
    cfg: &TrainConfig,
    vit: &ViTConfig,
    eval_set: Option<&E>,
) -> Result<(Checkpoint, TrainHistory)>
where
    S: PatchSource + ?Sized,
    E: PatchSource + ?Sized,
{
    cfg.validate()?;
    vit.validate()?;
    check_training_set(train_set)?;

    let start = Instant::now();
    let mut params = ModelParams::<f32>::init(vit, derive_seed(cfg.seed, "init"))?;
    let mut state = AdamState::new(params.iter());
    let adam = cfg.adam();
    let shuffle_seed = derive_seed(cfg.seed, "shuffle");
    let dropout_seed = derive_seed(cfg.seed, "dropout");
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng(derive_indexed(shuffle_seed, epoch as u64)));
        }
        let epoch_seed = derive_indexed(dropout_seed, epoch as u64);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<SampleResult> = batch
                .par_iter()
                .map(|&i| sample_gradient(&params, vit, train_set, i, derive_indexed(epoch_seed, i as u64)))
                .collect::<Result<_>>()?;
            let batch_loss: f64 = results.iter().map(|r| r.loss).sum();
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss became {batch_loss} in epoch {}, batch {b}; lower the learning rate",
                    epoch + 1
                )));
            }
            loss_sum += batch_loss;
            correct += results.iter().filter(|r| r.correct).count();

            let mut results = results.into_iter();
            let mut total = results.next().expect("non-empty batch").grads;
            for r in results {
                for (acc, g) in total.iter_mut().zip(&r.grads) {
                    acc.accumulate(g)?;
                }
            }
            let inv = 1.0 / batch.len() as f32;
            for g in &mut total {
                *g = g.scale(inv);
            }
            let mut slots: Vec<&mut Tensor<f32>> = params.iter_mut().collect();
            adam_step(&mut slots, &total, &mut state, &adam)?;
        }

        let n = train_set.len() as f64;
        let is_last = epoch + 1 == cfg.epochs;
        let eval = match eval_set {
            Some(e) if cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || is_last) => {
                Some(evaluate_params(&params, vit, e, cfg.positive_class)?)
            }
            _ => None,
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            mean_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            eval,
        };
        log::info!(
            "epoch {}/{}: loss {:.4}, train acc {:.4}{}",
            record.epoch,
            cfg.epochs,
            record.mean_loss,
            record.train_accuracy,
            record
                .eval
                .as_ref()
                .map(|m| format!(", eval acc {:.4}", m.accuracy))
                .unwrap_or_default()
        );
        history.epochs.push(record);
    }
    history.training_seconds = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    Ok((Checkpoint::new(vit.clone(), params, cfg.seed), history))
}

/// Eval-mode predictions for every patch of `source`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub classes: Vec<u8>,
    /// Probability of the positive class.
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

pub fn predict_source<S: PatchSource + ?Sized>(
    params: &ModelParams<f32>,
    vit: &ViTConfig,
    source: &S,
    positive_class: u8,
) -> Result<Predictions> {
    let out: Vec<(u8, f64)> = (0..source.len())
        .into_par_iter()
        .map(|i| {
            let pixels = source.pixels(i)?;
            let logits = crate::vit::forward_logits::<f32>(&pixels, params, vit, None)?;
            classify_logits(logits.data(), positive_class)
        })
        .collect::<Result<_>>()?;
    Ok(Predictions {
        classes: out.iter().map(|p| p.0).collect(),
        scores: out.iter().map(|p| p.1).collect(),
        labels: (0..source.len()).map(|i| source.label(i)).collect(),
    })
}

fn evaluate_params<S: PatchSource + ?Sized>(
    params: &ModelParams<f32>,
    vit: &ViTConfig,
    source: &S,
    positive_class: u8,
) -> Result<MetricsReport> {
    let p = predict_source(params, vit, source, positive_class)?;
    evaluate_predictions(&p.classes, &p.scores, &p.labels, positive_class)
}

/// Metrics of a checkpoint on a labeled source.
pub fn evaluate<S: PatchSource + ?Sized>(
    ckpt: &Checkpoint,
    source: &S,
    positive_class: u8,
) -> Result<MetricsReport> {
    evaluate_params(&ckpt.params, &ckpt.config, source, positive_class)
}
