//! Minibatch gradient descent, clean or adversarial.
//!
//! Every step attacks the batch against the current parameters, then takes
//! one plain gradient step on the mean loss of the attacked batch. With a
//! zero-strength attack this is ordinary training; with `batch_size >= n`
//! it is the full-batch loop.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{perturb, AttackSpec};
use crate::dataio::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{argmax, Classifier, Dense};
use crate::seed;

/// Losses above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub attack: AttackSpec,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.1,
            batch_size: 64,
            attack: AttackSpec::none(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::arg("epochs must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be >= 1"));
        }
        Ok(())
    }
}

/// Per-epoch log line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean loss over the attacked samples seen during the epoch.
    pub loss: f64,
    /// Clean accuracy on the training indices after the epoch.
    pub clean_acc: f64,
}

/// A batch as the optimizer saw it, before the update.
#[derive(Debug)]
pub struct BatchEvent<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub indices: &'a [usize],
    /// Attacked inputs, one per entry of `indices`.
    pub inputs: &'a [Vec<f64>],
    pub mean_loss: f64,
}

pub fn train(
    model_init: &Classifier,
    ds: &LabeledDataset,
    train_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<Classifier> {
    train_observed(model_init, ds, train_idx, cfg, |_| {}).map(|(m, _)| m)
}

/// [`train`] with a callback per batch; returns the per-epoch statistics.
pub fn train_observed<F>(
    model_init: &Classifier,
    ds: &LabeledDataset,
    train_idx: &[usize],
    cfg: &TrainConfig,
    mut observe: F,
) -> Result<(Classifier, Vec<EpochStats>)>
where
    F: FnMut(&BatchEvent<'_>),
{
    cfg.validate()?;
    ds.check_indices(train_idx)?;
    if train_idx.is_empty() {
        return Err(Error::arg("training index list is empty"));
    }
    if ds.dim() != model_init.input_dim() || ds.num_classes() != model_init.num_classes() {
        return Err(Error::arg(format!(
            "model shape {}->{} does not match dataset {}->{}",
            model_init.input_dim(),
            model_init.num_classes(),
            ds.dim(),
            ds.num_classes()
        )));
    }

    let mut model = model_init.clone();
    let mut order = train_idx.to_vec();
    let mut stats = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.copy_from_slice(train_idx);
        order.shuffle(&mut seed::derived_rng(cfg.seed, &[seed::tag::TRAIN, epoch as u64]));

        let mut epoch_loss = 0.0;
        for (batch, indices) in order.chunks(cfg.batch_size).enumerate() {
            let inputs = indices
                .iter()
                .map(|&i| perturb(&model, ds.row(i), ds.label(i), &cfg.attack))
                .collect::<Result<Vec<_>>>()?;
            let (loss_sum, grad) = batch_gradient(&model, &inputs, indices, ds)?;
            let mean_loss = loss_sum / indices.len() as f64;
            if !mean_loss.is_finite() || mean_loss > DIVERGENCE_LIMIT {
                return Err(Error::Diverged {
                    epoch,
                    batch,
                    loss: mean_loss,
                });
            }
            observe(&BatchEvent {
                epoch,
                batch,
                indices,
                inputs: &inputs,
                mean_loss,
            });
            model.apply_gradient(&grad, cfg.learning_rate / indices.len() as f64);
            if !model.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch,
                    loss: f64::NAN,
                });
            }
            epoch_loss += loss_sum;
        }
        stats.push(EpochStats {
            epoch,
            loss: epoch_loss / order.len() as f64,
            clean_acc: accuracy(&model, ds, train_idx, &AttackSpec::none())?,
        });
    }
    Ok((model, stats))
}

/// Summed loss and summed gradient over a batch, accumulated in batch order.
fn batch_gradient(
    model: &Classifier,
    inputs: &[Vec<f64>],
    indices: &[usize],
    ds: &LabeledDataset,
) -> Result<(f64, Vec<Dense>)> {
    let mut total: Vec<Dense> = model
        .layers()
        .iter()
        .map(|l| Dense::zeros(l.inputs, l.outputs))
        .collect();
    let mut loss_sum = 0.0;
    for (x, &i) in inputs.iter().zip(indices) {
        let (loss, grad) = model.loss_and_grad(x, ds.label(i))?;
        loss_sum += loss;
        for (acc, g) in total.iter_mut().zip(&grad) {
            for (a, v) in acc.weights.iter_mut().zip(&g.weights) {
                *a += v;
            }
            for (a, v) in acc.bias.iter_mut().zip(&g.bias) {
                *a += v;
            }
        }
    }
    Ok((loss_sum, total))
}

/// Top-1 accuracy on `idx` after attacking each sample with `attack`.
pub fn accuracy(
    model: &Classifier,
    ds: &LabeledDataset,
    idx: &[usize],
    attack: &AttackSpec,
) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::arg("accuracy over an empty index list"));
    }
    ds.check_indices(idx)?;
    let hits = idx
        .par_iter()
        .map(|&i| {
            let x = perturb(model, ds.row(i), ds.label(i), attack)?;
            Ok(usize::from(argmax(&model.forward(&x)?) == ds.label(i)))
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / idx.len() as f64)
}

pub fn write_log_csv(stats: &[EpochStats], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,loss,clean_acc\n");
    for s in stats {
        out.push_str(&format!("{},{},{}\n", s.epoch, s.loss, s.clean_acc));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
