//! `pestclf`: command-line driver for the transfer learning pipeline.
//!
//! Exit codes: 0 success, 2 configuration error, 3 stage failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use pestclf_core::augment::{self, AugmentationConfig};
use pestclf_core::backbone::{Backbone, BackboneSpec, FeatureMatrix};
use pestclf_core::dataset::{self, ClassLabel, DatasetManifest, Split, SplitRatios};
use pestclf_core::head::HeadArtifact;
use pestclf_core::optim::{HyperParams, OptimizerKind};
use pestclf_core::pipeline::{self, RunConfig, Workspace};
use pestclf_core::trainer::{self, TrainConfig};
use pestclf_core::tuner::{self, SearchConfig, SearchSpace, TuneArtifact};
use pestclf_core::{provenance::Provenance, Error, Result};

#[derive(Parser)]
#[command(name = "pestclf", version, about = "Frozen-backbone image classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a class-per-folder image tree into a manifest.
    Ingest {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign every sample to train, validation or test.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.7)]
        train: f64,
        #[arg(long, default_value_t = 0.15)]
        validation: f64,
        #[arg(long, default_value_t = 0.15)]
        test: f64,
    },
    /// Write augmented copies of the training images.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory; the augmented manifest goes to `<out>/manifest.json`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, default_value_t = 6)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the frozen backbone over one split (or all three).
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        backbone: BackboneArgs,
        /// train, validation, test or all.
        #[arg(long, default_value = "all")]
        split: String,
        /// A `.feat` file, or a directory when `--split all`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Random search over optimizer, learning rate and dropout.
    Tune {
        #[command(flatten)]
        features: FeatureArgs,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the softmax head with fixed hyperparameters.
    Train {
        #[command(flatten)]
        features: FeatureArgs,
        /// Manifest supplying class names; otherwise classes are numbered.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Take optimizer, learning rate and dropout from a tuning ledger.
        #[arg(long)]
        tune: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long)]
        optimizer: Option<OptimizerKind>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch CSV; defaults to the output path with a `.csv` extension.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Score a trained head on test features.
    Evaluate {
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        features_test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `confusion.csv` next to the report.
        #[arg(long)]
        confusion: Option<PathBuf>,
        /// Defaults to `roc/` next to the report.
        #[arg(long)]
        roc_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Classify images with a backbone and a trained head.
    Predict {
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        head: PathBuf,
        #[command(flatten)]
        backbone: BackboneArgs,
        /// Print one JSON object per image instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Run every stage from a config file, skipping up-to-date stages.
    Run(RunArgs),
}

#[derive(Args)]
struct BackboneArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Defaults to the graph path with a `.json` extension.
    #[arg(long)]
    sidecar: Option<PathBuf>,
}

impl BackboneArgs {
    fn spec(&self) -> Result<BackboneSpec> {
        let sidecar = self
            .sidecar
            .clone()
            .unwrap_or_else(|| BackboneSpec::sidecar_path(&self.graph));
        BackboneSpec::from_sidecar(&self.graph, &sidecar)
    }
}

#[derive(Args)]
struct FeatureArgs {
    #[arg(long)]
    features_train: PathBuf,
    #[arg(long)]
    features_val: PathBuf,
}

impl FeatureArgs {
    fn load(&self) -> Result<(FeatureMatrix, FeatureMatrix)> {
        Ok((
            FeatureMatrix::load(&self.features_train)?,
            FeatureMatrix::load(&self.features_val)?,
        ))
    }
}

#[derive(Args)]
struct RunArgs {
    /// TOML or JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, env = "PESTCLF_WORKSPACE")]
    workspace: Option<PathBuf>,
    #[arg(long)]
    dataset_root: Option<PathBuf>,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    sidecar: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    tune_epochs: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = RunConfig::load(&self.config)?;
        let base = self.config.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut config.dataset_root);
        rebase(&mut config.backbone_graph);
        rebase(&mut config.workspace);
        if let Some(s) = config.backbone_sidecar.as_mut() {
            rebase(s);
        }
        if let Some(v) = &self.workspace {
            config.workspace = v.clone();
        }
        if let Some(v) = &self.dataset_root {
            config.dataset_root = v.clone();
        }
        if let Some(v) = &self.graph {
            config.backbone_graph = v.clone();
        }
        if let Some(v) = &self.sidecar {
            config.backbone_sidecar = Some(v.clone());
        }
        if let Some(v) = self.seed {
            config.master_seed = v;
        }
        if let Some(v) = self.trials {
            config.tuning.trials = v;
        }
        if let Some(v) = self.tune_epochs {
            config.tuning.tune_epochs = v;
        }
        if let Some(v) = self.epochs {
            config.final_training.epochs = v;
        }
        if let Some(v) = self.batch {
            config.final_training.batch_size = v;
        }
        Ok(config)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}

fn parent_of(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn ensure_parent(path: &Path) -> Result<()> {
    let dir = parent_of(path);
    if dir.as_os_str().is_empty() {
        return Ok(());
    }
    fs::create_dir_all(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Ingest { root, out } => {
            let ingested = dataset::ingest(&root)?;
            ensure_parent(&out)?;
            ingested.manifest.save(&out)?;
            if !ingested.skipped.is_empty() {
                write_json(&out.with_extension("skipped.json"), &ingested.skipped)?;
            }
            println!(
                "{} samples in {} classes, {} skipped",
                ingested.manifest.samples.len(),
                ingested.manifest.num_classes(),
                ingested.skipped.len()
            );
        }
        Command::Split {
            manifest,
            out,
            seed,
            train,
            validation,
            test,
        } => {
            let ratios = SplitRatios {
                train,
                validation,
                test,
            };
            ratios.validate()?;
            let split = dataset::stratified_split(&DatasetManifest::load(&manifest)?, ratios, seed)?;
            ensure_parent(&out)?;
            split.save(&out)?;
            println!(
                "train {} / validation {} / test {}",
                split.count(Split::Train),
                split.count(Split::Validation),
                split.count(Split::Test)
            );
        }
        Command::Augment {
            manifest,
            out,
            n,
            k,
            seed,
        } => {
            let config = AugmentationConfig {
                iterations: n,
                copies_per_image: k,
                seed,
                ..AugmentationConfig::default()
            };
            let augmented = augment::augment_split(&DatasetManifest::load(&manifest)?, &config, &out)?;
            augmented.save(&out.join("manifest.json"))?;
            println!("{} training entries", augmented.count(Split::Train));
        }
        Command::Extract {
            manifest,
            backbone,
            split,
            out,
            seed,
        } => {
            let backbone = Backbone::load(backbone.spec()?)?;
            let manifest = DatasetManifest::load(&manifest)?;
            let targets: Vec<(Split, PathBuf)> = if split == "all" {
                [Split::Train, Split::Validation, Split::Test]
                    .into_iter()
                    .map(|s| (s, out.join(format!("{}.feat", s.as_str()))))
                    .collect()
            } else {
                vec![(split.parse()?, out.clone())]
            };
            for (split, path) in targets {
                let mut matrix = backbone.extract(&manifest, split)?;
                matrix.provenance = Some(pipeline::extract_provenance(backbone.spec(), split, seed)?);
                ensure_parent(&path)?;
                matrix.save(&path)?;
                println!("{}: {} x {} -> {}", split.as_str(), matrix.len(), matrix.dim, path.display());
            }
        }
        Command::Tune {
            features,
            trials,
            epochs,
            batch,
            seed,
            out,
        } => {
            let (train, val) = features.load()?;
            let space = SearchSpace::default();
            let search = SearchConfig {
                trials,
                tune_epochs: epochs,
                batch_size: batch,
                seed,
            };
            let classes = class_count(&train, &val);
            let result = tuner::run_search(&space, &search, &train, &val, classes)?;
            let mut artifact = TuneArtifact::new(&space, &search, &result);
            artifact.provenance = Some(Provenance::new("tune", seed, &(&space, &search))?);
            ensure_parent(&out)?;
            artifact.save(&out)?;
            for row in &artifact.rows {
                println!("{}\t{}\t{}\t{:.2}", row.dropout, row.lr, row.optimizer, row.val_accuracy);
            }
            println!(
                "best: {} lr={} dropout={} ({:.2})",
                artifact.best.optimizer, artifact.best.lr, artifact.best.dropout, artifact.best.val_accuracy
            );
        }
        Command::Train {
            features,
            manifest,
            tune,
            epochs,
            batch,
            optimizer,
            lr,
            dropout,
            seed,
            out,
            history,
        } => {
            let (train, val) = features.load()?;
            let tuned = tune.as_deref().map(TuneArtifact::load).transpose()?;
            let base = tuned.map(|t| t.best_hyperparams());
            let hyperparams = HyperParams {
                optimizer: optimizer
                    .or(base.map(|b| b.optimizer))
                    .ok_or_else(|| missing("--optimizer"))?,
                learning_rate: lr.or(base.map(|b| b.learning_rate)).ok_or_else(|| missing("--lr"))?,
                dropout_rate: dropout
                    .or(base.map(|b| b.dropout_rate))
                    .ok_or_else(|| missing("--dropout"))?,
            };
            let labels = match manifest {
                Some(path) => DatasetManifest::load(&path)?.labels,
                None => (0..class_count(&train, &val))
                    .map(|index| ClassLabel {
                        index,
                        name: format!("class{index}"),
                    })
                    .collect(),
            };
            let config = TrainConfig {
                epochs,
                batch_size: batch,
                seed,
                hyperparams,
            };
            let val = (!val.is_empty()).then_some(val);
            let (head, records) = pipeline::train_head(&train, val.as_ref(), labels, &config, seed)?;
            ensure_parent(&out)?;
            head.save(&out)?;
            let history = history.unwrap_or_else(|| out.with_extension("csv"));
            trainer::write_history_csv(&history, &records)?;
            if let Some(last) = records.last() {
                info!(
                    "epoch {}: train loss {:.4} acc {:.4}",
                    last.epoch, last.train_loss, last.train_accuracy
                );
            }
            println!("head -> {}, history -> {}", out.display(), history.display());
        }
        Command::Evaluate {
            head,
            features_test,
            out,
            confusion,
            roc_dir,
            seed,
        } => {
            let head = HeadArtifact::load(&head)?;
            let test = FeatureMatrix::load(&features_test)?;
            let report = pipeline::evaluate_head(&head, &test, seed)?;
            ensure_parent(&out)?;
            report.save(&out)?;
            let dir = parent_of(&out);
            report.write_confusion_csv(&confusion.unwrap_or_else(|| dir.join("confusion.csv")))?;
            report.write_roc_csvs(&roc_dir.unwrap_or_else(|| dir.join("roc")))?;
            println!(
                "accuracy {:.4}  macro P/R/F1 {:.4}/{:.4}/{:.4}  weighted P/R/F1 {:.4}/{:.4}/{:.4}",
                report.macro_avg.accuracy,
                report.macro_avg.precision,
                report.macro_avg.recall,
                report.macro_avg.f1,
                report.weighted.precision,
                report.weighted.recall,
                report.weighted.f1
            );
        }
        Command::Predict {
            images,
            head,
            backbone,
            json,
        } => {
            let head = HeadArtifact::load(&head)?;
            let backbone = Backbone::load(backbone.spec()?)?;
            for p in pipeline::predict_images(&images, &head, &backbone)? {
                if json {
                    println!("{}", serde_json::to_string(&p)?);
                } else {
                    let probs: Vec<String> = p.probabilities.iter().map(|v| format!("{v:.6}")).collect();
                    println!("{}\t{}\t{}", p.path.display(), p.label, probs.join(" "));
                }
            }
        }
        Command::Run(args) => {
            let config = args.resolve()?;
            let outcome = pipeline::run_pipeline(&config)?;
            for s in &outcome.stages {
                println!("{:<9} {}", s.stage, serde_json::to_string(&s.status)?.trim_matches('"'));
            }
            let ws = Workspace::new(&config.workspace);
            println!(
                "test accuracy {:.4}; report -> {}",
                outcome.report.macro_avg.accuracy,
                ws.report().display()
            );
        }
    }
    Ok(())
}

fn missing(flag: &str) -> Error {
    Error::Config(format!("{flag} is required unless --tune supplies it"))
}

/// Classes seen in either split, when no manifest names them.
fn class_count(train: &FeatureMatrix, val: &FeatureMatrix) -> usize {
    train
        .labels
        .iter()
        .chain(&val.labels)
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(0)
}
