//! Mini-batch training of the softmax head over extracted features.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMatrix;
use crate::error::{Error, Result};
use crate::head::{cross_entropy, HeadParams, Mode};
use crate::optim::{HyperParams, OptimizerState};
use crate::{par, seeding};

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hyperparams: HyperParams,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        self.hyperparams.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub params: HeadParams,
    pub history: Vec<EpochRecord>,
}

fn check_labels(data: &FeatureMatrix, classes: usize) -> Result<()> {
    match data.labels.iter().find(|&&l| l as usize >= classes) {
        Some(&l) => Err(Error::ClassIndex {
            index: l as usize,
            classes,
        }),
        None => Ok(()),
    }
}

/// Mean gradient of the batch `rows` (indices into `data`). Per-sample work
/// may run in parallel; the reduction is always in batch order.
pub fn batch_gradient(
    head: &HeadParams,
    data: &FeatureMatrix,
    rows: &[usize],
    dropout_seed: impl Fn(usize) -> u64 + Sync + Send,
) -> Result<(f64, Vec<f64>)> {
    let per_sample = par::try_map(rows, |pos, &row| {
        let mut rng = seeding::rng(dropout_seed(pos), &[]);
        let x = data.row(row);
        let target = data.labels[row] as usize;
        let trace = head.forward(x, Mode::Train, &mut rng)?;
        let loss = cross_entropy(&trace.probabilities, target)?;
        Ok::<_, Error>((loss, head.backward(&trace, x, target)?))
    })?;
    let mut sum = vec![0.0; head.param_count()];
    let mut loss = 0.0;
    for (l, g) in &per_sample {
        loss += l;
        for (s, v) in sum.iter_mut().zip(g) {
            *s += v;
        }
    }
    let n = rows.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Ok((loss / n, sum))
}

/// Trains a freshly initialized head. `val`, when given, is only evaluated;
/// it never feeds a gradient.
pub fn train(
    train: &FeatureMatrix,
    val: Option<&FeatureMatrix>,
    classes: usize,
    config: &TrainConfig,
) -> Result<Trained> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("train split"));
    }
    check_labels(train, classes)?;
    if let Some(v) = val {
        if v.dim != train.dim {
            return Err(Error::Dimension {
                expected: train.dim,
                actual: v.dim,
            });
        }
        check_labels(v, classes)?;
    }

    let seed = config.seed;
    let hp = config.hyperparams;
    let mut head = HeadParams::init(
        classes,
        train.dim,
        hp.dropout_rate,
        seeding::derive(seed, &[STREAM_INIT]),
    );
    let mut optimizer = OptimizerState::new(hp.optimizer);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut seeding::rng(seed, &[STREAM_SHUFFLE, epoch as u64]));
        for (batch, rows) in order.chunks(config.batch_size).enumerate() {
            let (loss, grad) = batch_gradient(&head, train, rows, |pos| {
                seeding::derive(seed, &[STREAM_DROPOUT, epoch as u64, batch as u64, pos as u64])
            })?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            optimizer
                .step(&mut head.values, &grad, hp.learning_rate)
                .map_err(|e| match e {
                    Error::NonFiniteGradient { .. } => Error::NonFiniteLoss { epoch, batch },
                    other => other,
                })?;
        }

        let (train_loss, train_accuracy) = evaluate_split(&head, train)?;
        let (val_loss, val_accuracy) = match val {
            Some(v) if !v.is_empty() => {
                let (l, a) = evaluate_split(&head, v)?;
                (Some(l), Some(a))
            }
            _ => (None, None),
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            train_accuracy,
            val_loss,
            val_accuracy,
        });
    }
    Ok(Trained {
        params: head,
        history,
    })
}

/// Inference-mode predicted class and probabilities for every row.
pub fn predict_all(params: &HeadParams, data: &FeatureMatrix) -> Result<Vec<(usize, Vec<f64>)>> {
    if data.dim != params.dim {
        return Err(Error::Dimension {
            expected: params.dim,
            actual: data.dim,
        });
    }
    let rows: Vec<usize> = (0..data.len()).collect();
    par::try_map(&rows, |_, &i| params.predict(data.row(i)))
}

/// Mean cross-entropy and accuracy (correct / N) in inference mode.
pub fn evaluate_split(params: &HeadParams, data: &FeatureMatrix) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Empty("feature matrix"));
    }
    let predictions = predict_all(params, data)?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for ((class, probs), &label) in predictions.iter().zip(&data.labels) {
        loss += cross_entropy(probs, label as usize)?;
        if *class == label as usize {
            correct += 1;
        }
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.train_accuracy.to_string(),
            opt(r.val_loss),
            opt(r.val_accuracy),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
