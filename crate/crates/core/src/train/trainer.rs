use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::adam::Adam;
use super::config::TrainConfig;
use super::metrics::Metrics;
use crate::autodiff::Tape;
use crate::data::PatchSet;
use crate::error::{Error, Result};
use crate::network::Model;
use crate::tensor::Tensor;

/// Stream offset so the shuffle order is independent of weight init.
const SHUFFLE_STREAM: u64 = 0x5eed_0f5a_u64;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Sample-weighted mean batch loss.
    pub loss: f64,
    /// Training-mode accuracy over the epoch's batches.
    pub accuracy: f64,
}

/// One optimizer step on a batch. `targets` are 0-based. Returns the loss
/// and the number of correct arg-max predictions.
pub fn train_step(
    model: &mut Model<f32>,
    adam: &mut Adam<f32>,
    batch: Tensor<f32>,
    targets: &[usize],
) -> Result<(f32, usize)> {
    model.store.zero_grad();
    let mut tape = Tape::new();
    let x = tape.constant(batch);
    let logits = model.forward(&mut tape, x)?;
    let loss = tape.cross_entropy(logits, targets)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            op: "cross_entropy",
        });
    }
    let c = model.config.num_classes;
    let correct = tape
        .value(logits)
        .data()
        .chunks(c)
        .zip(targets)
        .filter(|(row, &t)| argmax(row) == t)
        .count();
    tape.backward_into(loss, &mut model.store)?;
    adam.step(&mut model.store)?;
    for (id, v) in tape.take_buffer_updates() {
        model.store.set_value(id, v)?;
    }
    Ok((value, correct))
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains for `cfg.epochs` epochs over `train`, reshuffling every epoch.
/// The last partial batch is kept.
pub fn train(
    model: &mut Model<f32>,
    patches: &PatchSet,
    train: &[usize],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if train.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    let mut adam = Adam::new(&model.store, cfg.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut order = train.to_vec();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let targets: Vec<usize> = chunk.iter().map(|&i| patches.labels[i] - 1).collect();
            let (l, c) = train_step(model, &mut adam, patches.batch(chunk), &targets)?;
            loss_sum += l as f64 * chunk.len() as f64;
            correct += c;
        }
        let log = EpochLog {
            epoch,
            loss: loss_sum / order.len() as f64,
            accuracy: correct as f64 / order.len() as f64,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Inference-mode predictions (0-based) for the given patches.
pub fn predict(
    model: &Model<f32>,
    patches: &PatchSet,
    indices: &[usize],
    batch_size: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        out.extend(model.predict(patches.batch(chunk))?);
    }
    Ok(out)
}

pub fn evaluate(
    model: &Model<f32>,
    patches: &PatchSet,
    indices: &[usize],
    batch_size: usize,
) -> Result<Metrics> {
    if indices.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty test set".into()));
    }
    let pred = predict(model, patches, indices, batch_size)?;
    let truth: Vec<usize> = indices.iter().map(|&i| patches.labels[i] - 1).collect();
    Metrics::from_predictions(&truth, &pred, model.config.num_classes)
}
