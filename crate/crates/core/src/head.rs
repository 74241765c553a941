//! The trainable classifier on top of pooled features: inverted dropout, one
//! dense layer, softmax, and categorical cross-entropy with exact gradients.
//!
//! Parameters live in one flat vector, `W` row-major (`C x D`) followed by
//! `b` (`C`), so optimizers see a single contiguous slice.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ClassLabel;
use crate::error::{Error, Result};
use crate::optim::HyperParams;
use crate::provenance::Provenance;

/// Floor applied to the target probability before taking its log.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

/// `C * D + C`.
pub fn param_count(classes: usize, dim: usize) -> usize {
    classes * dim + classes
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub classes: usize,
    pub dim: usize,
    pub dropout_rate: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `true` where the feature survived dropout.
    pub mask: Vec<bool>,
    /// Multiplier applied to surviving features, `1 / (1 - p)` in training.
    pub keep_scale: f64,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-ln(max(p[target], 1e-12))`.
pub fn cross_entropy(probabilities: &[f64], target: usize) -> Result<f64> {
    let p = probabilities.get(target).ok_or(Error::ClassIndex {
        index: target,
        classes: probabilities.len(),
    })?;
    Ok(-p.max(PROBABILITY_FLOOR).ln())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl HeadParams {
    pub fn zeros(classes: usize, dim: usize, dropout_rate: f64) -> Self {
        HeadParams {
            classes,
            dim,
            dropout_rate,
            values: vec![0.0; param_count(classes, dim)],
        }
    }

    /// `W ~ U(-L, L)` with `L = sqrt(6 / (D + C))`, `b = 0`.
    pub fn init(classes: usize, dim: usize, dropout_rate: f64, seed: u64) -> Self {
        let mut head = Self::zeros(classes, dim, dropout_rate);
        let limit = (6.0 / (dim + classes) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in head.weights_mut() {
            *w = rng.random_range(-limit..limit);
        }
        head
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != param_count(self.classes, self.dim) {
            return Err(Error::Dimension {
                expected: param_count(self.classes, self.dim),
                actual: self.values.len(),
            });
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("head parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        param_count(self.classes, self.dim)
    }

    pub fn weights(&self) -> &[f64] {
        &self.values[..self.classes * self.dim]
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        let n = self.classes * self.dim;
        &mut self.values[..n]
    }

    pub fn bias(&self) -> &[f64] {
        &self.values[self.classes * self.dim..]
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        let n = self.classes * self.dim;
        &mut self.values[n..]
    }

    fn check_input(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn dropped<'a>(x: &'a [f32], trace: &'a ForwardTrace) -> impl Iterator<Item = f64> + 'a {
        let scale = trace.keep_scale;
        x.iter()
            .zip(trace.mask.iter())
            .map(move |(&v, &keep)| if keep { f64::from(v) * scale } else { 0.0 })
    }

    /// In [`Mode::Train`] each feature is kept with probability `1 - p` and
    /// scaled by `1 / (1 - p)`; `rng` is only consulted in that mode.
    pub fn forward<R: Rng + ?Sized>(&self, x: &[f32], mode: Mode, rng: &mut R) -> Result<ForwardTrace> {
        let p = self.dropout_rate;
        match mode {
            Mode::Train if p > 0.0 => {
                let mask = (0..self.dim).map(|_| rng.random::<f64>() >= p).collect();
                self.forward_masked(x, mask, 1.0 / (1.0 - p))
            }
            _ => self.infer(x),
        }
    }

    /// Inference-mode forward pass: every feature kept, no scaling.
    pub fn infer(&self, x: &[f32]) -> Result<ForwardTrace> {
        self.forward_masked(x, vec![true; self.dim], 1.0)
    }

    fn forward_masked(&self, x: &[f32], mask: Vec<bool>, keep_scale: f64) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut trace = ForwardTrace {
            mask,
            keep_scale,
            logits: Vec::new(),
            probabilities: Vec::new(),
        };
        let xt: Vec<f64> = Self::dropped(x, &trace).collect();
        trace.logits = self
            .weights()
            .chunks_exact(self.dim)
            .zip(self.bias())
            .map(|(row, b)| row.iter().zip(&xt).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect();
        trace.probabilities = softmax(&trace.logits);
        Ok(trace)
    }

    /// Gradient of the cross-entropy at `target`, flat in the same layout as
    /// [`HeadParams::values`]: `dW = (p - onehot) x~^T`, `db = p - onehot`.
    pub fn backward(&self, trace: &ForwardTrace, x: &[f32], target: usize) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if trace.probabilities.len() != self.classes || trace.mask.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.classes,
                actual: trace.probabilities.len(),
            });
        }
        if target >= self.classes {
            return Err(Error::ClassIndex {
                index: target,
                classes: self.classes,
            });
        }
        let mut delta = trace.probabilities.clone();
        delta[target] -= 1.0;
        let xt: Vec<f64> = Self::dropped(x, trace).collect();
        let mut grad = Vec::with_capacity(self.param_count());
        for d in &delta {
            grad.extend(xt.iter().map(|v| d * v));
        }
        grad.extend_from_slice(&delta);
        Ok(grad)
    }

    /// Inference-mode class and probabilities.
    pub fn predict(&self, x: &[f32]) -> Result<(usize, Vec<f64>)> {
        let trace = self.infer(x)?;
        Ok((argmax(&trace.probabilities), trace.probabilities))
    }
}

/// The persisted trained head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadArtifact {
    pub backbone: String,
    pub labels: Vec<ClassLabel>,
    #[serde(rename = "D")]
    pub dim: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    pub dropout_rate: f64,
    pub hyperparams: HyperParams,
    /// Row-major `C x D`.
    #[serde(rename = "W")]
    pub weights: Vec<f64>,
    pub b: Vec<f64>,
    pub training_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl HeadArtifact {
    pub fn new(
        backbone: &str,
        labels: Vec<ClassLabel>,
        params: &HeadParams,
        hyperparams: HyperParams,
        training_seed: u64,
    ) -> Self {
        HeadArtifact {
            backbone: backbone.to_owned(),
            labels,
            dim: params.dim,
            classes: params.classes,
            dropout_rate: params.dropout_rate,
            hyperparams,
            weights: params.weights().to_vec(),
            b: params.bias().to_vec(),
            training_seed,
            provenance: None,
        }
    }

    pub fn params(&self) -> Result<HeadParams> {
        let mut values = self.weights.clone();
        values.extend_from_slice(&self.b);
        let params = HeadParams {
            classes: self.classes,
            dim: self.dim,
            dropout_rate: self.dropout_rate,
            values,
        };
        params.validate()?;
        if self.labels.len() != self.classes {
            return Err(Error::Length {
                left: self.labels.len(),
                right: self.classes,
            });
        }
        Ok(params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let artifact: HeadArtifact = serde_json::from_str(&text)?;
        artifact.params()?;
        Ok(artifact)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
