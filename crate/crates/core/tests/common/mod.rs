//! Reference implementations used as test oracles. Each is written
//! independently of the library code it checks.
#![allow(dead_code, clippy::needless_range_loop)]

use pestclf_core::backbone::FeatureMatrix;
use pestclf_core::dataset::{ClassLabel, DatasetManifest, Sample, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Cross-entropy of a dense softmax layer, straight from the definition:
/// `log(sum_j exp(z_j)) - z_t` with `z = W x + b`.
pub fn loss_oracle(values: &[f64], classes: usize, dim: usize, x: &[f32], target: usize) -> f64 {
    let z: Vec<f64> = (0..classes)
        .map(|c| {
            let mut acc = values[classes * dim + c];
            for d in 0..dim {
                acc += values[c * dim + d] * f64::from(x[d]);
            }
            acc
        })
        .collect();
    let m = z.iter().cloned().fold(f64::MIN, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[target]
}

/// Central differences of [`loss_oracle`] for every parameter.
pub fn numeric_gradient(values: &[f64], classes: usize, dim: usize, x: &[f32], target: usize, h: f64) -> Vec<f64> {
    let mut probe = values.to_vec();
    (0..values.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = loss_oracle(&probe, classes, dim, x, target);
            probe[i] = orig - h;
            let down = loss_oracle(&probe, classes, dim, x, target);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero components
/// from dividing by rounding noise.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

/// Plain `exp / sum` without max-subtraction; fine for moderate logits.
pub fn softmax_oracle(logits: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = logits.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteMetrics {
    pub confusion: Vec<Vec<u64>>,
    /// `(precision, recall, f1, support)` per class.
    pub per_class: Vec<(f64, f64, f64, u64)>,
    pub macro_prf: (f64, f64, f64),
    pub weighted_prf: (f64, f64, f64),
    pub accuracy: f64,
}

/// Definitional metrics: every count is taken by scanning the raw vectors.
pub fn brute_metrics(actual: &[usize], predicted: &[usize], classes: usize) -> BruteMetrics {
    let n = actual.len();
    let mut confusion = vec![vec![0u64; classes]; classes];
    for a in 0..classes {
        for p in 0..classes {
            confusion[a][p] = (0..n).filter(|&i| actual[i] == a && predicted[i] == p).count() as u64;
        }
    }
    let mut per_class = Vec::new();
    for c in 0..classes {
        let tp = (0..n).filter(|&i| actual[i] == c && predicted[i] == c).count() as f64;
        let fp = (0..n).filter(|&i| actual[i] != c && predicted[i] == c).count() as f64;
        let fne = (0..n).filter(|&i| actual[i] == c && predicted[i] != c).count() as f64;
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fne > 0.0 { tp / (tp + fne) } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        per_class.push((p, r, f, (tp + fne) as u64));
    }
    let k = classes as f64;
    let macro_prf = (
        per_class.iter().map(|m| m.0).sum::<f64>() / k,
        per_class.iter().map(|m| m.1).sum::<f64>() / k,
        per_class.iter().map(|m| m.2).sum::<f64>() / k,
    );
    let weighted = |i: usize| {
        per_class
            .iter()
            .map(|m| [m.0, m.1, m.2][i] * m.3 as f64 / n as f64)
            .sum::<f64>()
    };
    let weighted_prf = (weighted(0), weighted(1), weighted(2));
    let correct = (0..n).filter(|&i| actual[i] == predicted[i]).count();
    BruteMetrics {
        confusion,
        per_class,
        macro_prf,
        weighted_prf,
        accuracy: correct as f64 / n as f64,
    }
}

/// ROC by exhaustive threshold enumeration: every distinct score and a
/// threshold above all of them; positive when `score >= threshold`.
/// Returns the sorted points and the trapezoidal area.
pub fn roc_enumeration(actual: &[usize], scores: &[Vec<f64>], class: usize) -> Option<(Vec<(f64, f64)>, f64)> {
    let pos = actual.iter().filter(|&&a| a == class).count();
    let neg = actual.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = scores.iter().map(|s| s[class]).collect();
    thresholds.push(f64::INFINITY);
    let mut points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let tp = (0..actual.len()).filter(|&i| actual[i] == class && scores[i][class] >= t).count();
            let fp = (0..actual.len()).filter(|&i| actual[i] != class && scores[i][class] >= t).count();
            (fp as f64 / neg as f64, tp as f64 / pos as f64)
        })
        .collect();
    points.sort_by(|a, b| a.partial_cmp(b).unwrap());
    points.dedup();
    let mut auc = 0.0;
    for w in points.windows(2) {
        auc += (w[1].0 - w[0].0) * (w[1].1 + w[0].1) * 0.5;
    }
    Some((points, auc))
}

/// Random `(actual, predicted, scores)` where score rows sum to 1.
pub fn random_instance(rng: &mut impl Rng, classes: usize, n: usize) -> (Vec<usize>, Vec<usize>, Vec<Vec<f64>>) {
    let actual: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let mut scores = Vec::with_capacity(n);
    let mut predicted = Vec::with_capacity(n);
    for _ in 0..n {
        // coarse values so that ties occur
        let raw: Vec<f64> = (0..classes).map(|_| f64::from(rng.random_range(1u32..6))).collect();
        let s: f64 = raw.iter().sum();
        let row: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let mut best = 0;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        predicted.push(if rng.random_bool(0.8) { best } else { rng.random_range(0..classes) });
        scores.push(row);
    }
    (actual, predicted, scores)
}

/// Isotropic Gaussian clusters around random centres, split per class into
/// `(train, val, test)` counts.
pub fn gaussian_splits(
    classes: usize,
    dim: usize,
    counts: (usize, usize, usize),
    spread: f64,
    seed: u64,
) -> (FeatureMatrix, FeatureMatrix, FeatureMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let noise = Normal::new(0.0, spread).unwrap();
    let mut out = [
        FeatureMatrix::empty("gauss", Split::Train, dim),
        FeatureMatrix::empty("gauss", Split::Validation, dim),
        FeatureMatrix::empty("gauss", Split::Test, dim),
    ];
    let sizes = [counts.0, counts.1, counts.2];
    for (m, &size) in out.iter_mut().zip(&sizes) {
        for c in 0..classes {
            for i in 0..size {
                let row: Vec<f32> = centres[c].iter().map(|v| (v + noise.sample(&mut rng)) as f32).collect();
                m.push(&format!("{c}-{i}"), c as u32, &row).unwrap();
            }
        }
    }
    let [a, b, c] = out;
    (a, b, c)
}

/// A ten-row tuning ledger: (dropout, learning rate, optimizer, validation accuracy %).
pub const LOOKUP_LEDGER: [(f64, f64, &str, f64); 10] = [
    (0.4, 0.1, "adam", 28.16),
    (0.2, 0.01, "adam", 28.61),
    (0.4, 0.01, "rmsprop", 32.39),
    (0.3, 0.001, "sgd", 40.84),
    (0.5, 0.00001, "rmsprop", 53.52),
    (0.5, 0.00001, "adam", 61.97),
    (0.4, 0.00001, "adam", 67.6),
    (0.5, 0.01, "sgd", 76.05),
    (0.2, 0.01, "sgd", 80.28),
    (0.4, 0.1, "sgd", 91.54),
];

/// Image counts per class of the eight-class reference dataset.
pub const PEST_COUNTS: [(&str, usize); 8] = [
    ("Agrotis ipsilon", 139),
    ("Amrasca devastans", 62),
    ("Aphis gossypii", 37),
    ("Bemisia tabaci", 35),
    ("Epilachna vigintioctopunctata", 35),
    ("Leptinotarsa decemlineata", 70),
    ("Myzus persicae", 75),
    ("Phthorimaea operculella", 42),
];

/// Manifest with `counts[c]` samples of class `c`, classes interleaved.
pub fn manifest_with_counts(counts: &[usize]) -> DatasetManifest {
    let labels = (0..counts.len())
        .map(|index| ClassLabel {
            index,
            name: format!("c{index}"),
        })
        .collect();
    let mut samples = Vec::new();
    // interleave classes so manifest order is not grouped by label
    let max = counts.iter().copied().max().unwrap_or(0);
    for i in 0..max {
        for (label, &n) in counts.iter().enumerate() {
            if i < n {
                samples.push(Sample {
                    id: format!("c{label}/{i}.png"),
                    path: format!("/data/c{label}/{i}.png"),
                    label,
                    split: Split::Unassigned,
                    source_id: None,
                    draw_seed: None,
                });
            }
        }
    }
    DatasetManifest {
        seed: None,
        ratios: None,
        labels,
        samples,
    }
}

/// Floor rule applied by hand: train and validation floored, test takes the rest.
pub fn floor_oracle(n: usize) -> (usize, usize, usize) {
    let train = (n * 70) / 100;
    let validation = (n * 15) / 100;
    (train, validation, n - train - validation)
}
