use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::engine::ops::cross_entropy;
use crate::engine::{sgd_step, BackwardOptions, Model, OutputGrad};
use crate::error::{Error, Result};
use crate::graph::HsdTree;

/// Plain SGD with a step-decayed learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 100,
            initial_lr: 0.01,
            lr_decay_factor: 10.0,
            lr_decay_every: 50,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    /// Learning rate used during 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = epoch / self.lr_decay_every.max(1);
        self.initial_lr / self.lr_decay_factor.powi(steps as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean loss over the epoch's mini-batches, weighted by batch size.
    pub loss: f64,
    /// Accuracy of the predictions made during the epoch.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,loss,accuracy\n");
        for r in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.lr, r.loss, r.accuracy));
        }
        out
    }
}

/// Output column of every class the model scores.
fn column_lookup<M: Model + ?Sized>(model: &M) -> BTreeMap<usize, usize> {
    model.output_classes().iter().enumerate().map(|(j, &c)| (c, j)).collect()
}

fn targets(cols: &BTreeMap<usize, usize>, labels: &[usize]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|l| {
            cols.get(l)
                .copied()
                .ok_or_else(|| Error::Dataset(format!("label {l} is not an output class of the model")))
        })
        .collect()
}

fn argmax(row: &[f64], allowed: Option<&[usize]>) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (j, &v) in row.iter().enumerate() {
        if allowed.is_some_and(|a| !a.contains(&j)) {
            continue;
        }
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    best.map_or(0, |(j, _)| j)
}

/// Mini-batch SGD on mean cross-entropy. Aborts on a non-finite loss or
/// gradient, naming the epoch and batch.
pub fn train<M: Model>(model: &mut M, data: &Dataset, schedule: &TrainSchedule) -> Result<History> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cols = column_lookup(model);
    let all_targets = targets(&cols, data.labels())?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let bs = schedule.batch_size.max(1);
    let mut history = History::default();
    for epoch in 0..schedule.epochs {
        let lr = schedule.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (batch_no, idx) in order.chunks(bs).enumerate() {
            let (batch, _) = data.gather(idx);
            let t: Vec<usize> = idx.iter().map(|&i| all_targets[i]).collect();
            let fwd = model.forward(&batch, None)?;
            let (loss, grad) = cross_entropy(&fwd.probs, &t);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_no });
            }
            let k = fwd.probs.dim(1);
            correct += t
                .iter()
                .enumerate()
                .filter(|(i, &y)| argmax(&fwd.logits.data()[i * k..(i + 1) * k], None) == y)
                .count();
            loss_sum += loss * idx.len() as f64;
            let grads = model.backward(&fwd, &OutputGrad::Logits(grad), BackwardOptions::default())?;
            sgd_step(model.params_mut(), &grads, lr)?;
        }
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok(history)
}

/// Trains a fully parameterized tree end to end through its single softmax
/// over the concatenated leaf logits.
pub fn finetune(tree: &mut HsdTree, data: &Dataset, schedule: &TrainSchedule) -> Result<History> {
    let missing = tree.missing_params();
    if let Some(edge) = missing.first() {
        return Err(Error::Transfer { edge: edge.clone(), reason: "edge has no parameters".into() });
    }
    train(tree, data, schedule)
}

const EVAL_BATCH: usize = 64;

/// Mean cross-entropy over the whole dataset, without updating anything.
pub fn mean_loss<M: Model + ?Sized>(model: &M, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cols = column_lookup(model);
    let starts: Vec<usize> = (0..data.len()).step_by(EVAL_BATCH).collect();
    let sums = starts
        .iter()
        .map(|&s| -> Result<f64> {
            let idx: Vec<usize> = (s..(s + EVAL_BATCH).min(data.len())).collect();
            let (batch, labels) = data.gather(&idx);
            let t = targets(&cols, &labels)?;
            let fwd = model.forward(&batch, None)?;
            Ok(cross_entropy(&fwd.probs, &t).0 * idx.len() as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sums.iter().sum::<f64>() / data.len() as f64)
}

/// Top-1 accuracy.
///
/// With `restrict`, only samples labelled with one of those classes count
/// and the prediction is the best-scoring class among them. Without it the
/// model's own output classes play that role, so a full model is scored on
/// every sample with an unrestricted argmax.
pub fn evaluate<M: Model + Sync + ?Sized>(model: &M, data: &Dataset, restrict: Option<&[usize]>) -> Result<f64> {
    let (correct, total) = evaluate_counts(model, data, restrict)?;
    Ok(correct as f64 / total as f64)
}

/// Correct and counted samples behind [`evaluate`].
pub fn evaluate_counts<M: Model + Sync + ?Sized>(
    model: &M,
    data: &Dataset,
    restrict: Option<&[usize]>,
) -> Result<(usize, usize)> {
    let outputs = model.output_classes();
    let subset: Vec<usize> = match restrict {
        Some(s) => {
            if let Some(c) = s.iter().find(|c| !outputs.contains(c)) {
                return Err(Error::InvalidSubset(format!("class {c} is not scored by the model")));
            }
            s.to_vec()
        }
        None => outputs.to_vec(),
    };
    let allowed_cols: Vec<usize> = subset
        .iter()
        .map(|c| outputs.iter().position(|o| o == c).expect("checked above"))
        .collect();
    let restricted = allowed_cols.len() != outputs.len();
    let idx: Vec<usize> = (0..data.len()).filter(|&i| subset.contains(&data.labels()[i])).collect();
    if idx.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let chunks: Vec<&[usize]> = idx.chunks(EVAL_BATCH).collect();
    let correct = chunks
        .par_iter()
        .map(|chunk| -> Result<usize> {
            let (batch, labels) = data.gather(chunk);
            let fwd = model.forward(&batch, None)?;
            let k = fwd.logits.dim(1);
            Ok(labels
                .iter()
                .enumerate()
                .filter(|(i, y)| {
                    let row = &fwd.logits.data()[i * k..(i + 1) * k];
                    let j = argmax(row, restricted.then_some(allowed_cols.as_slice()));
                    outputs[j] == **y
                })
                .count())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok((correct, idx.len()))
}
