mod common;

use pestclf_core::head::{self, HeadArtifact, HeadParams, Mode};
use pestclf_core::dataset::ClassLabel;
use pestclf_core::optim::{HyperParams, OptimizerKind};
use pestclf_core::seeding;
use proptest::prelude::*;
use rand::Rng;

fn random_head(rng: &mut impl Rng, classes: usize, dim: usize) -> (HeadParams, Vec<f32>, usize) {
    let mut h = HeadParams::zeros(classes, dim, 0.0);
    for v in &mut h.values {
        *v = rng.random_range(-1.0..1.0);
    }
    let x: Vec<f32> = (0..dim).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    (h, x, rng.random_range(0..classes))
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = seeding::rng(2024, &[]);
    for case in 0..100 {
        let classes = rng.random_range(2..9);
        let dim = rng.random_range(1..17);
        let (h, x, target) = random_head(&mut rng, classes, dim);
        let trace = h.forward(&x, Mode::Train, &mut rng).unwrap();
        let analytic = h.backward(&trace, &x, target).unwrap();
        let numeric = common::numeric_gradient(&h.values, classes, dim, &x, target, 1e-6);
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let err = common::relative_error(*a, *n);
            assert!(err < 1e-4, "case {case} param {i}: {a} vs {n} ({err})");
        }
    }
}

#[test]
fn infer_matches_softmax_oracle() {
    let mut rng = seeding::rng(7, &[]);
    for _ in 0..50 {
        let (h, x, _) = random_head(&mut rng, 3, 4);
        let logits: Vec<f64> = (0..3)
            .map(|c| (0..4).map(|d| h.values[c * 4 + d] * f64::from(x[d])).sum::<f64>() + h.values[12 + c])
            .collect();
        let want = common::softmax_oracle(&logits);
        let got = h.infer(&x).unwrap().probabilities;
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
        let (class, _) = h.predict(&x).unwrap();
        let oracle_argmax = (0..3).fold(0, |b, i| if want[i] > want[b] { i } else { b });
        assert_eq!(class, oracle_argmax);
    }
}

#[test]
fn inverted_dropout_preserves_expectation() {
    let dim = 5;
    let mut h = HeadParams::zeros(2, dim, 0.3);
    h.values[..dim].fill(1.0);
    let x = [1.0f32, -2.0, 0.5, 3.0, 0.25];
    let draws = 100_000;
    let mut sums = [0.0f64; 5];
    let mut rng = seeding::rng(99, &[]);
    for _ in 0..draws {
        let t = h.forward(&x, Mode::Train, &mut rng).unwrap();
        for d in 0..dim {
            if t.mask[d] {
                sums[d] += f64::from(x[d]) * t.keep_scale;
            }
        }
    }
    for d in 0..dim {
        let mean = sums[d] / draws as f64;
        let want = f64::from(x[d]);
        assert!((mean - want).abs() <= 0.01 * want.abs(), "feature {d}: {mean} vs {want}");
    }
}

#[test]
fn predict_ignores_dropout_seed() {
    let mut rng = seeding::rng(3, &[]);
    let (mut h, x, _) = random_head(&mut rng, 4, 6);
    h.dropout_rate = 0.5;
    let a = h.predict(&x).unwrap();
    let b = h.predict(&x).unwrap();
    assert_eq!(a, b);
    let inf = h.forward(&x, Mode::Infer, &mut seeding::rng(1, &[])).unwrap();
    let inf2 = h.forward(&x, Mode::Infer, &mut seeding::rng(2, &[])).unwrap();
    assert_eq!(inf, inf2);
}

#[test]
fn parameter_counts_for_known_widths() {
    for (d, want) in [(1280, 10_248), (4032, 32_264), (2048, 16_392), (1920, 15_368)] {
        assert_eq!(head::param_count(8, d), want);
        assert_eq!(HeadParams::zeros(8, d, 0.0).values.len(), want);
    }
}

#[test]
fn artifact_round_trip_and_field_names() {
    let dir = tempfile::tempdir().unwrap();
    let mut h = HeadParams::init(2, 3, 0.2, 5);
    h.bias_mut().copy_from_slice(&[0.5, -0.5]);
    let labels = vec![
        ClassLabel { index: 0, name: "a".into() },
        ClassLabel { index: 1, name: "b".into() },
    ];
    let hp = HyperParams {
        optimizer: OptimizerKind::Sgd,
        learning_rate: 0.1,
        dropout_rate: 0.2,
    };
    let art = HeadArtifact::new("toy", labels, &h, hp, 11);
    let path = dir.path().join("head.json");
    art.save(&path).unwrap();
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    for key in ["backbone", "labels", "D", "C", "dropout_rate", "hyperparams", "W", "b", "training_seed"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    let back = HeadArtifact::load(&path).unwrap();
    assert_eq!(back, art);
    assert_eq!(back.params().unwrap(), h);
}

proptest! {
    #[test]
    fn softmax_sums_to_one(logits in prop::collection::vec(-1e4f64..1e4, 1..12)) {
        let p = head::softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn loss_is_nonnegative(raw in prop::collection::vec(0.0f64..1.0, 2..9), t in 0usize..8) {
        let s: f64 = raw.iter().sum();
        prop_assume!(s > 0.0);
        let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let t = t % p.len();
        let l = head::cross_entropy(&p, t).unwrap();
        prop_assert!(l >= 0.0 && l.is_finite());
    }
}
