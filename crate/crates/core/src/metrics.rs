//! Multiclass evaluation: confusion matrix, per-class precision / recall /
//! F1, macro and support-weighted averages, one-vs-rest ROC curves.
//!
//! Everything is computed as fractions in `[0, 1]`. Percentages only appear
//! through [`display_percent`].

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::ClassLabel;
use crate::error::{Error, Result};
use crate::provenance::Provenance;

/// Rows are actual classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|c| self.counts[c][c]).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn column_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|row| row[c]).sum()
    }

    /// `trace / total`.
    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub class: usize,
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`; empty when undefined.
    pub points: Vec<(f64, f64)>,
    /// `None` when the class has no positives or no negatives.
    pub auc: Option<f64>,
}

/// Rounds a fraction to a whole percent, half away from zero.
pub fn display_percent(fraction: f64) -> u32 {
    (fraction * 100.0).round() as u32
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion(actual: &[usize], predicted: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if actual.len() != predicted.len() {
        return Err(Error::Length {
            left: actual.len(),
            right: predicted.len(),
        });
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&a, &p) in actual.iter().zip(predicted) {
        for index in [a, p] {
            if index >= classes {
                return Err(Error::ClassIndex { index, classes });
            }
        }
        counts[a][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

/// One-vs-rest reduction per class: `TP = cm[c][c]`, `FP` the rest of column
/// `c`, `FN` the rest of row `c`.
pub fn class_metrics(cm: &ConfusionMatrix) -> Result<Vec<ClassMetrics>> {
    if cm.classes() == 0 || cm.total() == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    Ok((0..cm.classes())
        .map(|c| {
            let tp = cm.counts[c][c];
            let predicted = cm.column_sum(c);
            let support = cm.row_sum(c);
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            ClassMetrics {
                class: c,
                precision,
                recall,
                f1: f1_score(precision, recall),
                support,
            }
        })
        .collect())
}

/// `(macro, weighted)` averages. Both carry the overall accuracy.
pub fn aggregate(per_class: &[ClassMetrics], cm: &ConfusionMatrix) -> Result<(Summary, Summary)> {
    if per_class.len() != cm.classes() {
        return Err(Error::Length {
            left: per_class.len(),
            right: cm.classes(),
        });
    }
    let total = cm.total();
    if total == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let accuracy = cm.accuracy();
    let c = per_class.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / c;
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        per_class.iter().map(|m| m.support as f64 * f(m)).sum::<f64>() / total as f64
    };
    let macro_avg = Summary {
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
        accuracy,
    };
    let weighted_avg = Summary {
        precision: weighted(|m| m.precision),
        recall: weighted(|m| m.recall),
        f1: weighted(|m| m.f1),
        accuracy,
    };
    Ok((macro_avg, weighted_avg))
}

/// One-vs-rest ROC for `class`. A sample is called positive when its score
/// is at least the threshold; thresholds run over the distinct scores, high
/// to low, so tied scores enter the curve together.
pub fn roc_curve(actual: &[usize], scores: &[Vec<f64>], class: usize) -> Result<RocCurve> {
    if actual.len() != scores.len() {
        return Err(Error::Length {
            left: actual.len(),
            right: scores.len(),
        });
    }
    for (i, row) in scores.iter().enumerate() {
        if class >= row.len() {
            return Err(Error::ClassIndex {
                index: class,
                classes: row.len(),
            });
        }
        if (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("score row {i} does not sum to 1")));
        }
    }
    let mut pairs: Vec<(f64, bool)> = scores
        .iter()
        .zip(actual)
        .map(|(row, &a)| (row[class], a == class))
        .collect();
    let positives = pairs.iter().filter(|p| p.1).count();
    let negatives = pairs.len() - positives;
    if positives == 0 || negatives == 0 {
        log::warn!("class {class}: ROC undefined ({positives} positives, {negatives} negatives)");
        return Ok(RocCurve {
            class,
            points: Vec::new(),
            auc: None,
        });
    }

    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < pairs.len() {
        let threshold = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == threshold {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / negatives as f64, tp as f64 / positives as f64));
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    Ok(RocCurve {
        class,
        points,
        auc: Some(auc),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub labels: Vec<ClassLabel>,
    pub samples: usize,
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: Summary,
    pub weighted: Summary,
    pub roc: Vec<RocCurve>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl EvalReport {
    pub fn build(
        labels: Vec<ClassLabel>,
        actual: &[usize],
        predicted: &[usize],
        scores: &[Vec<f64>],
    ) -> Result<Self> {
        let classes = labels.len();
        let cm = confusion(actual, predicted, classes)?;
        let per_class = class_metrics(&cm)?;
        let (macro_avg, weighted) = aggregate(&per_class, &cm)?;
        let roc = (0..classes)
            .map(|c| roc_curve(actual, scores, c))
            .collect::<Result<_>>()?;
        Ok(EvalReport {
            labels,
            samples: actual.len(),
            confusion: cm,
            per_class,
            macro_avg,
            weighted,
            roc,
            provenance: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Header row of class names, then one row per actual class.
    pub fn write_confusion_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["actual\\predicted".to_owned()];
        header.extend(self.labels.iter().map(|l| l.name.clone()));
        w.write_record(&header)?;
        for (label, row) in self.labels.iter().zip(&self.confusion.counts) {
            let mut record = vec![label.name.clone()];
            record.extend(row.iter().map(u64::to_string));
            w.write_record(&record)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Writes `roc_class<c>.csv` (`fpr,tpr`) for every class with a curve.
    pub fn write_roc_csvs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for curve in self.roc.iter().filter(|c| c.auc.is_some()) {
            let path = dir.join(format!("roc_class{}.csv", curve.class));
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["fpr", "tpr"])?;
            for (fpr, tpr) in &curve.points {
                w.write_record([fpr.to_string(), tpr.to_string()])?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
