//! End-to-end orchestration: ingest, split, augment, extract, tune, train,
//! evaluate. Every stage writes its artifact into a workspace directory and
//! records a content-hash key; a rerun skips stages whose key is unchanged
//! and whose outputs still exist.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::augment::{self, AugmentationConfig};
use crate::backbone::{Backbone, BackboneSpec, FeatureMatrix};
use crate::dataset::{self, DatasetManifest, Split, SplitRatios};
use crate::error::{Error, Result};
use crate::head::HeadArtifact;
use crate::metrics::EvalReport;
use crate::provenance::{hash_file, hash_json, Provenance};
use crate::trainer::{self, TrainConfig};
use crate::tuner::{self, SearchConfig, SearchSpace, TuneArtifact};
use crate::seeding;

const FINAL_TRAIN_STREAM: u64 = 0x66696e616c;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuningSettings {
    pub trials: usize,
    pub tune_epochs: usize,
}

impl Default for TuningSettings {
    fn default() -> Self {
        TuningSettings {
            trials: 10,
            tune_epochs: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinalTraining {
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for FinalTraining {
    fn default() -> Self {
        FinalTraining {
            epochs: 50,
            batch_size: 16,
        }
    }
}

/// Everything `run` needs. Loaded from TOML or JSON; omitted numeric
/// sections fall back to the defaults (10 trials x 20 epochs, final 50
/// epochs at batch 16, 70/15/15 split, one augmentation pass of 6 copies).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    pub backbone_graph: PathBuf,
    /// Defaults to the graph path with a `.json` extension.
    pub backbone_sidecar: Option<PathBuf>,
    pub workspace: PathBuf,
    pub master_seed: u64,
    pub split_ratios: SplitRatios,
    /// The `seed` field is ignored; augmentation is seeded by `master_seed`.
    pub augmentation: AugmentationConfig,
    pub search_space: SearchSpace,
    pub tuning: TuningSettings,
    pub final_training: FinalTraining,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_root: PathBuf::new(),
            backbone_graph: PathBuf::new(),
            backbone_sidecar: None,
            workspace: PathBuf::from("workspace"),
            master_seed: 0,
            split_ratios: SplitRatios::default(),
            augmentation: AugmentationConfig::default(),
            search_space: SearchSpace::default(),
            tuning: TuningSettings::default(),
            final_training: FinalTraining::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Ok(serde_json::from_str(&text)?),
            _ => toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display()))),
        }
    }

    pub fn sidecar(&self) -> PathBuf {
        self.backbone_sidecar
            .clone()
            .unwrap_or_else(|| BackboneSpec::sidecar_path(&self.backbone_graph))
    }

    pub fn augmentation(&self) -> AugmentationConfig {
        AugmentationConfig {
            seed: self.master_seed,
            ..self.augmentation.clone()
        }
    }

    pub fn search(&self) -> SearchConfig {
        SearchConfig {
            trials: self.tuning.trials,
            tune_epochs: self.tuning.tune_epochs,
            batch_size: self.final_training.batch_size,
            seed: self.master_seed,
        }
    }

    /// Checks paths and every numeric precondition before any stage runs.
    pub fn validate(&self) -> Result<()> {
        for (what, path) in [
            ("dataset root", &self.dataset_root),
            ("backbone graph", &self.backbone_graph),
            ("backbone sidecar", &self.sidecar()),
        ] {
            if !path.exists() {
                return Err(Error::Config(format!("{what} {} does not exist", path.display())));
            }
        }
        self.split_ratios.validate()?;
        self.augmentation.validate()?;
        self.search_space.validate()?;
        if self.tuning.trials == 0 || self.tuning.tune_epochs == 0 {
            return Err(Error::Config("tuning needs at least one trial and one epoch".into()));
        }
        if self.tuning.trials > self.search_space.size() {
            return Err(Error::SearchSpaceTooSmall {
                requested: self.tuning.trials,
                available: self.search_space.size(),
            });
        }
        if self.final_training.epochs == 0 || self.final_training.batch_size == 0 {
            return Err(Error::Config("final training needs epochs >= 1 and batch >= 1".into()));
        }
        Ok(())
    }
}

/// Artifact locations inside a workspace.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn ingest_manifest(&self) -> PathBuf {
        self.root.join("manifest.ingest.json")
    }
    pub fn ingest_report(&self) -> PathBuf {
        self.root.join("ingest_skipped.json")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn augmented_dir(&self) -> PathBuf {
        self.root.join("augmented")
    }
    pub fn augmented_manifest(&self) -> PathBuf {
        self.root.join("manifest.augmented.json")
    }
    pub fn features(&self, split: Split) -> PathBuf {
        self.root.join("features").join(format!("{}.feat", split.as_str()))
    }
    pub fn tune(&self) -> PathBuf {
        self.root.join("tune.json")
    }
    pub fn head(&self) -> PathBuf {
        self.root.join("head.json")
    }
    pub fn history(&self) -> PathBuf {
        self.root.join("history.csv")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn confusion_csv(&self) -> PathBuf {
        self.root.join("confusion.csv")
    }
    pub fn roc_dir(&self) -> PathBuf {
        self.root.join("roc")
    }
    fn stamp(&self, stage: &str) -> PathBuf {
        self.root.join(".stamps").join(format!("{stage}.key"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Computed,
    Cached,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageRun {
    pub stage: &'static str,
    pub status: StageStatus,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub stages: Vec<StageRun>,
    pub report: EvalReport,
}

/// Hash of a directory tree: sorted relative paths with their content hashes.
fn hash_tree(root: &Path) -> Result<String> {
    fn walk(dir: &Path, base: &Path, out: &mut Vec<(String, String)>) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(&path, base, out)?;
            } else {
                let rel = path.strip_prefix(base).unwrap_or(&path).to_string_lossy().into_owned();
                out.push((rel, hash_file(&path)?));
            }
        }
        Ok(())
    }
    let mut listing = Vec::new();
    walk(root, root, &mut listing)?;
    hash_json(&listing)
}

struct Runner<'a> {
    ws: &'a Workspace,
    stages: Vec<StageRun>,
}

impl Runner<'_> {
    /// Runs `body` unless the stamp for `stage` equals `key` and every
    /// output exists.
    fn stage(
        &mut self,
        stage: &'static str,
        key: String,
        outputs: &[PathBuf],
        body: impl FnOnce() -> Result<()>,
    ) -> Result<()> {
        let stamp = self.ws.stamp(stage);
        let wrap = |e: Error| Error::Stage {
            stage,
            artifact: outputs.first().cloned().unwrap_or_default(),
            source: Box::new(e),
        };
        let fresh = fs::read_to_string(&stamp).map(|k| k == key).unwrap_or(false)
            && outputs.iter().all(|p| p.exists());
        if fresh {
            log::info!("{stage}: up to date");
            self.stages.push(StageRun {
                stage,
                status: StageStatus::Cached,
            });
            return Ok(());
        }
        log::info!("{stage}: running");
        let _ = fs::remove_file(&stamp);
        body().map_err(wrap)?;
        let dir = stamp.parent().expect("stamp has a parent");
        fs::create_dir_all(dir).map_err(|e| wrap(Error::io(dir, e)))?;
        fs::write(&stamp, &key).map_err(|e| wrap(Error::io(&stamp, e)))?;
        self.stages.push(StageRun {
            stage,
            status: StageStatus::Computed,
        });
        Ok(())
    }
}

fn key(parts: serde_json::Value) -> Result<String> {
    hash_json(&parts)
}

/// Provenance of an extraction: path-free description of the backbone.
pub fn extract_provenance(spec: &BackboneSpec, split: Split, master_seed: u64) -> Result<Provenance> {
    Provenance::new(
        "extract",
        master_seed,
        &json!({
            "backbone": spec.name,
            "feature_dim": spec.feature_dim,
            "input_size": spec.input_size,
            "preprocessing": spec.preprocessing,
            "split": split,
        }),
    )
}

/// Trains the final head with `hyperparams` and packages it.
pub fn train_head(
    train: &FeatureMatrix,
    val: Option<&FeatureMatrix>,
    labels: Vec<dataset::ClassLabel>,
    config: &TrainConfig,
    master_seed: u64,
) -> Result<(HeadArtifact, Vec<trainer::EpochRecord>)> {
    let trained = trainer::train(train, val, labels.len(), config)?;
    let mut artifact = HeadArtifact::new(
        &train.backbone,
        labels,
        &trained.params,
        config.hyperparams,
        config.seed,
    );
    artifact.provenance = Some(Provenance::new("train", master_seed, config)?);
    Ok((artifact, trained.history))
}

/// Scores `test` with a trained head and builds the full report.
pub fn evaluate_head(head: &HeadArtifact, test: &FeatureMatrix, master_seed: u64) -> Result<EvalReport> {
    if head.backbone != test.backbone || head.dim != test.dim {
        return Err(Error::BackboneMismatch {
            head: head.backbone.clone(),
            head_dim: head.dim,
            backbone: test.backbone.clone(),
            backbone_dim: test.dim,
        });
    }
    if test.is_empty() {
        return Err(Error::Empty("test split"));
    }
    let params = head.params()?;
    let predictions = trainer::predict_all(&params, test)?;
    let actual: Vec<usize> = test.labels.iter().map(|&l| l as usize).collect();
    let predicted: Vec<usize> = predictions.iter().map(|p| p.0).collect();
    let scores: Vec<Vec<f64>> = predictions.into_iter().map(|p| p.1).collect();
    let mut report = EvalReport::build(head.labels.clone(), &actual, &predicted, &scores)?;
    report.provenance = Some(Provenance::new(
        "evaluate",
        master_seed,
        &json!({ "backbone": head.backbone, "classes": head.classes, "dim": head.dim }),
    )?);
    Ok(report)
}

pub fn save_report(report: &EvalReport, ws: &Workspace) -> Result<()> {
    report.save(&ws.report())?;
    report.write_confusion_csv(&ws.confusion_csv())?;
    report.write_roc_csvs(&ws.roc_dir())
}

/// Runs every stage in order, reusing artifacts whose inputs are unchanged.
pub fn run_pipeline(config: &RunConfig) -> Result<PipelineOutcome> {
    config.validate()?;
    let ws = Workspace::new(&config.workspace);
    fs::create_dir_all(&ws.root).map_err(|e| Error::io(&ws.root, e))?;
    let seed = config.master_seed;
    let mut run = Runner {
        ws: &ws,
        stages: Vec::new(),
    };

    let k = key(json!({ "stage": "ingest", "tree": hash_tree(&config.dataset_root)?,
        "root": config.dataset_root }))?;
    run.stage("ingest", k, &[ws.ingest_manifest(), ws.ingest_report()], || {
        let ingested = dataset::ingest(&config.dataset_root)?;
        ingested.manifest.save(&ws.ingest_manifest())?;
        let text = serde_json::to_string_pretty(&ingested.skipped)?;
        fs::write(ws.ingest_report(), text).map_err(|e| Error::io(ws.ingest_report(), e))
    })?;

    let k = key(json!({ "stage": "split", "input": hash_file(&ws.ingest_manifest())?,
        "ratios": config.split_ratios, "seed": seed }))?;
    run.stage("split", k, &[ws.manifest()], || {
        let raw = DatasetManifest::load(&ws.ingest_manifest())?;
        dataset::stratified_split(&raw, config.split_ratios, seed)?.save(&ws.manifest())
    })?;

    let aug = config.augmentation();
    let k = key(json!({ "stage": "augment", "input": hash_file(&ws.manifest())?, "config": aug,
        "out": ws.augmented_dir() }))?;
    run.stage("augment", k, &[ws.augmented_manifest()], || {
        let dir = ws.augmented_dir();
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let manifest = DatasetManifest::load(&ws.manifest())?;
        augment::augment_split(&manifest, &aug, &dir)?.save(&ws.augmented_manifest())
    })?;

    let sidecar = config.sidecar();
    let spec = BackboneSpec::from_sidecar(&config.backbone_graph, &sidecar)?;
    let splits = [Split::Train, Split::Validation, Split::Test];
    let feature_paths: Vec<PathBuf> = splits.iter().map(|&s| ws.features(s)).collect();
    let k = key(json!({ "stage": "extract", "input": hash_file(&ws.augmented_manifest())?,
        "graph": hash_file(&config.backbone_graph)?, "sidecar": hash_file(&sidecar)? }))?;
    run.stage("extract", k, &feature_paths, || {
        let backbone = Backbone::load(spec.clone())?;
        let manifest = DatasetManifest::load(&ws.augmented_manifest())?;
        let dir = ws.root.join("features");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (&split, path) in splits.iter().zip(&feature_paths) {
            let mut matrix = backbone.extract(&manifest, split)?;
            matrix.provenance = Some(extract_provenance(backbone.spec(), split, seed)?);
            matrix.save(path)?;
        }
        Ok(())
    })?;

    let labels = DatasetManifest::load(&ws.manifest())?.labels;
    let features_key = feature_paths
        .iter()
        .map(|p| hash_file(p))
        .collect::<Result<Vec<_>>>()?;

    let search = config.search();
    let k = key(json!({ "stage": "tune", "features": features_key[..2], "space": config.search_space,
        "search": search }))?;
    run.stage("tune", k, &[ws.tune()], || {
        let train = FeatureMatrix::load(&ws.features(Split::Train))?;
        let val = FeatureMatrix::load(&ws.features(Split::Validation))?;
        let result = tuner::run_search(&config.search_space, &search, &train, &val, labels.len())?;
        let mut artifact = TuneArtifact::new(&config.search_space, &search, &result);
        artifact.provenance = Some(Provenance::new(
            "tune",
            seed,
            &json!({ "space": config.search_space, "search": search }),
        )?);
        artifact.save(&ws.tune())
    })?;

    let k = key(json!({ "stage": "train", "features": features_key[..2], "tune": hash_file(&ws.tune())?,
        "final": config.final_training, "seed": seed }))?;
    run.stage("train", k, &[ws.head(), ws.history()], || {
        let best = TuneArtifact::load(&ws.tune())?.best_hyperparams();
        let train = FeatureMatrix::load(&ws.features(Split::Train))?;
        let val = FeatureMatrix::load(&ws.features(Split::Validation))?;
        let tc = TrainConfig {
            epochs: config.final_training.epochs,
            batch_size: config.final_training.batch_size,
            seed: seeding::derive(seed, &[FINAL_TRAIN_STREAM]),
            hyperparams: best,
        };
        let (head, history) = train_head(&train, Some(&val), labels.clone(), &tc, seed)?;
        head.save(&ws.head())?;
        trainer::write_history_csv(&ws.history(), &history)
    })?;

    let k = key(json!({ "stage": "evaluate", "head": hash_file(&ws.head())?,
        "test": features_key[2] }))?;
    run.stage("evaluate", k, &[ws.report(), ws.confusion_csv()], || {
        let head = HeadArtifact::load(&ws.head())?;
        let test = FeatureMatrix::load(&ws.features(Split::Test))?;
        save_report(&evaluate_head(&head, &test, seed)?, &ws)
    })?;

    Ok(PipelineOutcome {
        stages: run.stages,
        report: EvalReport::load(&ws.report())?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub path: PathBuf,
    pub class: usize,
    pub label: String,
    pub probabilities: Vec<f64>,
}

/// Classifies images with a backbone and a trained head. The head must have
/// been trained on features from the same backbone.
pub fn predict_images(paths: &[PathBuf], head: &HeadArtifact, backbone: &Backbone) -> Result<Vec<Prediction>> {
    let spec = backbone.spec();
    if head.backbone != spec.name || head.dim != spec.feature_dim {
        return Err(Error::BackboneMismatch {
            head: head.backbone.clone(),
            head_dim: head.dim,
            backbone: spec.name.clone(),
            backbone_dim: spec.feature_dim,
        });
    }
    let params = head.params()?;
    paths
        .iter()
        .map(|path| {
            let features = backbone.features_for_path(path)?;
            let (class, probabilities) = params.predict(&features)?;
            Ok(Prediction {
                path: path.clone(),
                class,
                label: head.labels[class].name.clone(),
                probabilities,
            })
        })
        .collect()
}
