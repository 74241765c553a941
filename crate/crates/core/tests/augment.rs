use std::collections::HashMap;
use std::fs;
use std::path::Path;

use pestclf_core::augment::{self, AugmentationConfig};
use pestclf_core::dataset::{self, DatasetManifest, Split, SplitRatios};
use pestclf_core::provenance::hash_file;
use pestclf_fixtures as fx;
use proptest::prelude::*;

fn fixture_manifest(root: &Path) -> DatasetManifest {
    fx::write_two_class_dataset(root, 5);
    let raw = dataset::ingest(root).unwrap().manifest;
    dataset::stratified_split(&raw, SplitRatios::default(), 2).unwrap()
}

fn config(n: usize, k: usize) -> AugmentationConfig {
    AugmentationConfig {
        iterations: n,
        copies_per_image: k,
        seed: 77,
        ..AugmentationConfig::default()
    }
}

#[test]
fn count_law_and_label_inheritance() {
    let dir = tempfile::tempdir().unwrap();
    let m = fixture_manifest(&dir.path().join("data"));
    let train = m.count(Split::Train);
    assert_eq!(train, 14);

    for (n, k) in [(1, 1), (1, 3), (2, 2)] {
        let out = dir.path().join(format!("aug_{n}_{k}"));
        let aug = augment::augment_split(&m, &config(n, k), &out).unwrap();
        assert_eq!(aug.count(Split::Train), train * (1 + n * k));
        assert_eq!(aug.count(Split::Train), config(n, k).expanded_count(train));

        let by_id: HashMap<&str, usize> = m.samples.iter().map(|s| (s.id.as_str(), s.label)).collect();
        for s in aug.split(Split::Train) {
            assert!(Path::new(&s.path).exists());
            if let Some(src) = &s.source_id {
                assert_eq!(by_id[src.as_str()], s.label, "{}", s.id);
                assert!(s.draw_seed.is_some());
            }
        }

        // validation and test entries pass through unchanged
        for split in [Split::Validation, Split::Test] {
            let before: Vec<_> = m.split(split).collect();
            let after: Vec<_> = aug.split(split).collect();
            assert_eq!(before, after);
        }
    }
}

#[test]
fn zero_iterations_copies_originals_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let m = fixture_manifest(&dir.path().join("data"));
    let aug = augment::augment_split(&m, &config(0, 6), &dir.path().join("aug")).unwrap();
    let originals: Vec<_> = m.split(Split::Train).collect();
    let copies: Vec<_> = aug.split(Split::Train).collect();
    assert_eq!(originals.len(), copies.len());
    for (o, c) in originals.iter().zip(&copies) {
        assert_eq!(o.id, c.id);
        assert_ne!(o.path, c.path);
        assert_eq!(
            hash_file(Path::new(&o.path)).unwrap(),
            hash_file(Path::new(&c.path)).unwrap()
        );
    }
}

#[test]
fn reruns_write_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let m = fixture_manifest(&dir.path().join("data"));
    let a = augment::augment_split(&m, &config(1, 2), &dir.path().join("a")).unwrap();
    let b = augment::augment_split(&m, &config(1, 2), &dir.path().join("b")).unwrap();
    let ta: Vec<_> = a.split(Split::Train).collect();
    let tb: Vec<_> = b.split(Split::Train).collect();
    for (x, y) in ta.iter().zip(&tb) {
        assert_eq!(x.id, y.id);
        assert_eq!(x.draw_seed, y.draw_seed);
        assert_eq!(fs::read(&x.path).unwrap(), fs::read(&y.path).unwrap(), "{}", x.id);
    }
}

#[test]
fn identity_config_preserves_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let m = fixture_manifest(&dir.path().join("data"));
    let identity = config(1, 2).identity();
    let aug = augment::augment_split(&m, &identity, &dir.path().join("aug")).unwrap();
    for s in aug.split(Split::Train).filter(|s| s.source_id.is_some()) {
        let src = m.samples.iter().find(|o| Some(&o.id) == s.source_id.as_ref()).unwrap();
        let a = image::open(&src.path).unwrap().to_rgb8();
        let b = image::open(&s.path).unwrap().to_rgb8();
        assert_eq!(a, b, "{}", s.id);
    }
}

#[test]
fn empty_train_split_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = fixture_manifest(&dir.path().join("data"));
    for s in &mut m.samples {
        if s.split == Split::Train {
            s.split = Split::Test;
        }
    }
    assert!(augment::augment_split(&m, &config(1, 1), &dir.path().join("aug")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn transformed_images_keep_shape(w in 1u32..24, h in 1u32..24, seed in any::<u64>()) {
        use rand::SeedableRng;
        let img = image::RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 9) as u8, (y * 11) as u8, 128]));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let out = augment::augment_image(&img, &AugmentationConfig::default(), &mut rng).unwrap();
        prop_assert_eq!(out.dimensions(), (w, h));
    }
}
