//! Random search over a discrete grid of optimizer, learning rate and
//! dropout rate. Each trial trains a fresh head; the configuration with the
//! highest validation accuracy wins.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMatrix;
use crate::error::{Error, Result};
use crate::optim::{HyperParams, OptimizerKind};
use crate::provenance::Provenance;
use crate::trainer::{self, TrainConfig};
use crate::{par, seeding};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub optimizers: Vec<OptimizerKind>,
    pub learning_rates: Vec<f64>,
    pub dropout_rates: Vec<f64>,
}

impl Default for SearchSpace {
    /// 3 optimizers x 5 learning rates x 4 dropout rates.
    fn default() -> Self {
        SearchSpace {
            optimizers: OptimizerKind::ALL.to_vec(),
            learning_rates: vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5],
            dropout_rates: vec![0.2, 0.3, 0.4, 0.5],
        }
    }
}

impl SearchSpace {
    pub fn size(&self) -> usize {
        self.optimizers.len() * self.learning_rates.len() * self.dropout_rates.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.size() == 0 {
            return Err(Error::Config("every search dimension needs at least one value".into()));
        }
        Ok(())
    }

    /// Grid point `index`, optimizer-major then learning rate then dropout.
    pub fn config_at(&self, index: usize) -> HyperParams {
        let nd = self.dropout_rates.len();
        let nl = self.learning_rates.len();
        HyperParams {
            optimizer: self.optimizers[index / (nl * nd)],
            learning_rate: self.learning_rates[(index / nd) % nl],
            dropout_rate: self.dropout_rates[index % nd],
        }
    }

    pub fn grid(&self) -> Vec<HyperParams> {
        (0..self.size()).map(|i| self.config_at(i)).collect()
    }
}

/// `n` distinct grid indices, uniformly without replacement. A partial
/// Fisher-Yates shuffle, so the first `k` of a longer draw with the same seed
/// equal a draw of `k`.
pub fn sample_indices(size: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > size {
        return Err(Error::SearchSpaceTooSmall {
            requested: n,
            available: size,
        });
    }
    let mut rng = seeding::rng(seed, &[]);
    let mut pool: Vec<usize> = (0..size).collect();
    for i in 0..n {
        let j = rng.random_range(i..size);
        pool.swap(i, j);
    }
    pool.truncate(n);
    Ok(pool)
}

pub fn sample_configs(space: &SearchSpace, n: usize, seed: u64) -> Result<Vec<HyperParams>> {
    space.validate()?;
    Ok(sample_indices(space.size(), n, seed)?
        .into_iter()
        .map(|i| space.config_at(i))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_index: usize,
    pub hyperparams: HyperParams,
    pub seed: u64,
    pub epochs_run: usize,
    pub val_accuracy_per_epoch: Vec<f64>,
    /// Best validation accuracy over the trial's epochs.
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub seed: u64,
    pub trials: Vec<TrialRecord>,
    pub best_trial: usize,
    pub best: HyperParams,
    pub best_objective: f64,
}

/// Trial seed: master seed mixed with the trial index.
pub fn trial_seed(master: u64, trial: usize) -> u64 {
    seeding::derive(master, &[0x7472_6961_6c00, trial as u64])
}

/// Index of the highest objective; ties go to the earliest trial.
pub fn select_best(trials: &[TrialRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, t) in trials.iter().enumerate() {
        if best.is_none_or(|b| t.objective > trials[b].objective) {
            best = Some(i);
        }
    }
    best
}

/// Evaluates every configuration with `objective`, which returns the
/// per-epoch validation accuracies of one trial. Trials may run
/// concurrently; the ledger is always in trial order.
pub fn run_trials<F>(configs: &[HyperParams], seed: u64, objective: F) -> Result<TuneResult>
where
    F: Fn(usize, u64, &HyperParams) -> Result<Vec<f64>> + Sync + Send,
{
    if configs.is_empty() {
        return Err(Error::Empty("trial list"));
    }
    let trials = par::try_map(configs, |i, hp| {
        let s = trial_seed(seed, i);
        let curve = objective(i, s, hp).map_err(|e| Error::Trial {
            trial: i,
            source: Box::new(e),
        })?;
        let best = curve.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok::<_, Error>(TrialRecord {
            trial_index: i,
            hyperparams: *hp,
            seed: s,
            epochs_run: curve.len(),
            val_accuracy_per_epoch: curve,
            objective: best,
        })
    })?;
    let best_trial = select_best(&trials).expect("non-empty");
    Ok(TuneResult {
        seed,
        best: trials[best_trial].hyperparams,
        best_objective: trials[best_trial].objective,
        best_trial,
        trials,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub trials: usize,
    pub tune_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            trials: 10,
            tune_epochs: 20,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Samples `config.trials` grid points and trains a head for each.
pub fn run_search(
    space: &SearchSpace,
    config: &SearchConfig,
    train: &FeatureMatrix,
    val: &FeatureMatrix,
    classes: usize,
) -> Result<TuneResult> {
    let configs = sample_configs(space, config.trials, config.seed)?;
    if val.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    run_trials(&configs, config.seed, |_, seed, hp| {
        let tc = TrainConfig {
            epochs: config.tune_epochs,
            batch_size: config.batch_size,
            seed,
            hyperparams: *hp,
        };
        let trained = trainer::train(train, Some(val), classes, &tc)?;
        Ok(trained
            .history
            .iter()
            .map(|r| r.val_accuracy.unwrap_or(0.0))
            .collect())
    })
}

/// One ledger row: the sampled configuration and its validation accuracy in
/// percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub dropout: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub val_accuracy: f64,
}

impl From<&TrialRecord> for LedgerRow {
    fn from(t: &TrialRecord) -> Self {
        LedgerRow {
            dropout: t.hyperparams.dropout_rate,
            lr: t.hyperparams.learning_rate,
            optimizer: t.hyperparams.optimizer,
            val_accuracy: t.objective * 100.0,
        }
    }
}

/// The persisted tuning ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneArtifact {
    pub seed: u64,
    pub space: SearchSpace,
    pub search: SearchConfig,
    pub rows: Vec<LedgerRow>,
    pub best: LedgerRow,
    pub best_trial: usize,
    pub trials: Vec<TrialRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl TuneArtifact {
    pub fn new(space: &SearchSpace, search: &SearchConfig, result: &TuneResult) -> Self {
        TuneArtifact {
            seed: result.seed,
            space: space.clone(),
            search: *search,
            rows: result.trials.iter().map(LedgerRow::from).collect(),
            best: LedgerRow::from(&result.trials[result.best_trial]),
            best_trial: result.best_trial,
            trials: result.trials.clone(),
            provenance: None,
        }
    }

    pub fn best_hyperparams(&self) -> HyperParams {
        self.trials[self.best_trial].hyperparams
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let artifact: TuneArtifact = serde_json::from_str(&text)?;
        if artifact.best_trial >= artifact.trials.len() {
            return Err(Error::Config(format!(
                "{}: best trial {} out of range",
                path.display(),
                artifact.best_trial
            )));
        }
        Ok(artifact)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
