//! Dataset manifests: ingesting a class-per-folder image tree and assigning
//! each sample to train, validation or test with a per-class floor rule.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{par, seeding};

/// Classes smaller than this are rejected by [`stratified_split`].
pub const MIN_CLASS_SIZE: usize = 3;

const RATIO_TOLERANCE: f64 = 1e-9;
// Guards floor() against products like 0.7 * n landing one ulp below an integer.
const FLOOR_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLabel {
    pub index: usize,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// `<class folder>/<file name>` for ingested images; augmented variants
    /// append `#aug<iteration>.<copy>`.
    pub id: String,
    pub path: String,
    pub label: usize,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draw_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.70,
            validation: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.validation, self.test];
        let in_range = all.iter().all(|r| *r > 0.0 && *r < 1.0);
        let sum: f64 = all.iter().sum();
        if !in_range || (sum - 1.0).abs() > RATIO_TOLERANCE {
            return Err(Error::InvalidRatios {
                train: self.train,
                validation: self.validation,
                test: self.test,
            });
        }
        Ok(())
    }

    /// Per-class (train, validation, test) sizes: train and validation are
    /// floored, test takes the remainder.
    pub fn allocate(&self, n: usize) -> (usize, usize, usize) {
        let floor = |r: f64| ((r * n as f64) + FLOOR_EPS).floor() as usize;
        let train = floor(self.train).min(n);
        let validation = floor(self.validation).min(n - train);
        (train, validation, n - train - validation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Seed of the split that produced the assignment; `None` before splitting.
    pub seed: Option<u64>,
    pub ratios: Option<SplitRatios>,
    pub labels: Vec<ClassLabel>,
    pub samples: Vec<Sample>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// `counts[class]` over the samples of one split.
    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.labels.len()];
        for s in self.split(split) {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut counts = vec![0; self.labels.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.check_labels()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn check_labels(&self) -> Result<()> {
        for (i, l) in self.labels.iter().enumerate() {
            if l.index != i {
                return Err(Error::Config(format!(
                    "label `{}` has index {} at position {i}",
                    l.name, l.index
                )));
            }
        }
        let classes = self.labels.len();
        if let Some(s) = self.samples.iter().find(|s| s.label >= classes) {
            return Err(Error::ClassIndex {
                index: s.label,
                classes,
            });
        }
        Ok(())
    }
}

/// A file that was found under a class folder but could not be decoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub manifest: DatasetManifest,
    pub skipped: Vec<Skipped>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn decodes(path: &Path) -> std::result::Result<(), String> {
    image::ImageReader::open(path)
        .map_err(|e| e.to_string())?
        .with_guessed_format()
        .map_err(|e| e.to_string())?
        .decode()
        .map(|_| ())
        .map_err(|e| e.to_string())
}

/// Scans `root/<class>/<image>` into an unsplit manifest. Labels follow the
/// lexicographic order of the class folder names; files that fail to decode
/// are skipped and reported.
pub fn ingest(root: &Path) -> Result<Ingested> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if class_dirs.is_empty() {
        return Err(Error::Config(format!(
            "{} contains no class folders",
            root.display()
        )));
    }

    let mut labels = Vec::with_capacity(class_dirs.len());
    let mut candidates = Vec::new();
    for (index, dir) in class_dirs.iter().enumerate() {
        let name = file_name(dir);
        for file in sorted_entries(dir)?.into_iter().filter(|p| p.is_file()) {
            candidates.push((index, file));
        }
        labels.push(ClassLabel { index, name });
    }

    let decoded = par::map(&candidates, |_, (_, path)| decodes(path));

    let mut samples = Vec::with_capacity(candidates.len());
    let mut skipped = Vec::new();
    for ((label, path), outcome) in candidates.into_iter().zip(decoded) {
        match outcome {
            Ok(()) => samples.push(Sample {
                id: format!("{}/{}", labels[label].name, file_name(&path)),
                path: path.to_string_lossy().into_owned(),
                label,
                split: Split::Unassigned,
                source_id: None,
                draw_seed: None,
            }),
            Err(reason) => {
                log::warn!("skipping {}: {reason}", path.display());
                skipped.push(Skipped {
                    path: path.to_string_lossy().into_owned(),
                    reason,
                });
            }
        }
    }

    let manifest = DatasetManifest {
        seed: None,
        ratios: None,
        labels,
        samples,
    };
    if let Some(empty) = manifest
        .class_sizes()
        .iter()
        .position(|&n| n == 0)
    {
        return Err(Error::EmptyClass {
            class: manifest.labels[empty].name.clone(),
        });
    }
    Ok(Ingested { manifest, skipped })
}

/// Assigns every sample of `manifest` to a split. Within each class the
/// samples are shuffled by a stream keyed on `(seed, class)`, then the first
/// `floor(train * n)` go to train, the next `floor(validation * n)` to
/// validation and the rest to test. Sample order in the manifest is kept.
pub fn stratified_split(
    manifest: &DatasetManifest,
    ratios: SplitRatios,
    seed: u64,
) -> Result<DatasetManifest> {
    ratios.validate()?;
    let sizes = manifest.class_sizes();
    for (label, &n) in manifest.labels.iter().zip(&sizes) {
        if n < MIN_CLASS_SIZE {
            return Err(Error::ClassTooSmall {
                class: label.name.clone(),
                count: n,
                min: MIN_CLASS_SIZE,
            });
        }
    }

    let mut out = manifest.clone();
    out.seed = Some(seed);
    out.ratios = Some(ratios);
    for class in 0..manifest.num_classes() {
        let mut members: Vec<usize> = (0..out.samples.len())
            .filter(|&i| out.samples[i].label == class)
            .collect();
        members.shuffle(&mut seeding::rng(seed, &[class as u64]));
        let (train, validation, _) = ratios.allocate(members.len());
        for (rank, &i) in members.iter().enumerate() {
            out.samples[i].split = if rank < train {
                Split::Train
            } else if rank < train + validation {
                Split::Validation
            } else {
                Split::Test
            };
        }
    }
    Ok(out)
}
