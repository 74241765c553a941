use std::path::Path;

use image::{DynamicImage, Rgb, RgbImage};
use pestclf_core::backbone::{self, Backbone, BackboneSpec, FeatureMatrix, Preprocessing};
use pestclf_core::dataset::{self, Split};
use pestclf_core::Error;
use pestclf_fixtures as fx;

fn load_color(dir: &Path) -> Backbone {
    let (graph, sidecar) = fx::write_color_backbone(dir);
    Backbone::load(BackboneSpec::from_sidecar(&graph, &sidecar).unwrap()).unwrap()
}

/// Independent bilinear reference: explicit four-neighbour weights in f64.
fn bilinear_oracle(src: &[f32], w: usize, h: usize, out: usize, c: usize, ox: usize, oy: usize) -> f64 {
    let coord = |o: usize, n: usize| {
        let s = (o as f64 + 0.5) * n as f64 / out as f64 - 0.5;
        s.max(0.0).min((n - 1) as f64)
    };
    let (sx, sy) = (coord(ox, w), coord(oy, h));
    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
    let p = |x: usize, y: usize| f64::from(src[(y * w + x) * 3 + c]);
    p(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + p(x1, y0) * fx * (1.0 - fy)
        + p(x0, y1) * (1.0 - fx) * fy
        + p(x1, y1) * fx * fy
}

#[test]
fn checkerboard_resize_matches_reference() {
    let (w, h, out) = (10usize, 10usize, 224usize);
    let mut src = vec![0f32; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let v = if (x + y) % 2 == 0 { 255.0 } else { 0.0 };
            for c in 0..3 {
                src[(y * w + x) * 3 + c] = if c == 1 { 255.0 - v } else { v };
            }
        }
    }
    let planar = backbone::resize_bilinear(&src, w, h, out);
    assert_eq!(planar.len(), 3 * out * out);
    for c in 0..3 {
        for oy in 0..out {
            for ox in 0..out {
                let got = f64::from(planar[(c * out + oy) * out + ox]);
                let want = bilinear_oracle(&src, w, h, out, c, ox, oy);
                // values span 0..255; 1e-5 relative to that range
                assert!((got - want).abs() <= 1e-5 * 255.0, "c{c} ({ox},{oy}): {got} vs {want}");
            }
        }
    }
}

#[test]
fn graph_output_matches_channel_means() {
    let dir = tempfile::tempdir().unwrap();
    let bb = load_color(dir.path());
    assert_eq!(bb.feature_dim(), 4);
    let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(17, 23, Rgb([51, 102, 204])));
    let f = bb.features(&img).unwrap();
    let (r, g, b) = (51.0 / 255.0, 102.0 / 255.0, 204.0 / 255.0);
    let want = [r, g, b, 0.333 * (r + g + b)];
        // f32 accumulation over 224 x 224 pixels
    for (got, want) in f.iter().zip(want) {
        assert!((f64::from(*got) - want).abs() < 1e-4, "{f:?}");
    }
}

#[test]
fn zero_image_is_finite_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let bb = load_color(dir.path());
    let img = DynamicImage::ImageRgb8(RgbImage::new(224, 224));
    let a = bb.features(&img).unwrap();
    let b = bb.features(&img).unwrap();
    assert!(a.iter().all(|v| v.is_finite()));
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn declared_dim_must_match_graph() {
    let dir = tempfile::tempdir().unwrap();
    let (graph, sidecar) = fx::write_backbone(dir.path(), "toy", &fx::COLOR_WEIGHTS, 5);
    let err = Backbone::load(BackboneSpec::from_sidecar(&graph, &sidecar).unwrap()).unwrap_err();
    assert!(matches!(err, Error::FeatureDimMismatch { graph: 4, declared: 5 }), "{err}");
    let text = err.to_string();
    assert!(text.contains('4') && text.contains('5'));
}

#[test]
fn known_backbone_names_pin_their_dims() {
    let dir = tempfile::tempdir().unwrap();
    let (graph, sidecar) = fx::write_backbone(dir.path(), "InceptionV3", &fx::COLOR_WEIGHTS, 4);
    let err = BackboneSpec::from_sidecar(&graph, &sidecar).unwrap_err();
    assert!(matches!(err, Error::KnownBackboneDim { expected: 2048, declared: 4, .. }));

    let weights = vec![[0.1f32, 0.2, 0.3]; 2048];
    let (graph, sidecar) = fx::write_backbone(dir.path(), "InceptionV3", &weights, 2048);
    let bb = Backbone::load(BackboneSpec::from_sidecar(&graph, &sidecar).unwrap()).unwrap();
    let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(8, 8, Rgb([10, 20, 30])));
    assert_eq!(bb.features(&img).unwrap().len(), 2048);
}

#[test]
fn preprocessing_variants() {
    let spec = |p| BackboneSpec {
        name: "x".into(),
        graph_path: "x.onnx".into(),
        feature_dim: 1,
        input_size: 4,
        preprocessing: p,
    };
    let gray = DynamicImage::ImageRgb8(RgbImage::from_pixel(3, 3, Rgb([255, 255, 255])));
    let v = backbone::preprocess(&gray, &spec(Preprocessing::ScaleMinusOneOne)).unwrap();
    assert!(v.iter().all(|&x| (x - 1.0).abs() < 1e-6));
    let v = backbone::preprocess(&gray, &spec(Preprocessing::ScaleZeroOne)).unwrap();
    assert!(v.iter().all(|&x| (x - 1.0).abs() < 1e-6));
}

#[test]
fn extract_follows_manifest_order_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fx::write_two_class_dataset(&data, 3);
    let bb = load_color(&dir.path().join("bb"));
    let manifest = dataset::stratified_split(&dataset::ingest(&data).unwrap().manifest, Default::default(), 1).unwrap();

    let train = bb.extract(&manifest, Split::Train).unwrap();
    let ids: Vec<&str> = manifest.split(Split::Train).map(|s| s.id.as_str()).collect();
    assert_eq!(train.sample_ids, ids);
    assert_eq!(train.len(), 14);
    assert_eq!(train.dim, 4);
    for (i, s) in manifest.split(Split::Train).enumerate() {
        assert_eq!(train.labels[i] as usize, s.label);
    }

    let again = bb.extract(&manifest, Split::Train).unwrap();
    assert_eq!(train, again);

    let path = dir.path().join("train.feat");
    train.save(&path).unwrap();
    assert_eq!(FeatureMatrix::load(&path).unwrap(), train);

    // The two colour classes separate on the red channel.
    for (row, &label) in train.rows().zip(&train.labels) {
        assert_eq!(label == 0, row[0] > row[2], "{row:?}");
    }
}

#[test]
fn empty_split_gives_empty_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fx::write_two_class_dataset(&data, 3);
    let bb = load_color(&dir.path().join("bb"));
    let manifest = dataset::ingest(&data).unwrap().manifest;
    let m = bb.extract(&manifest, Split::Test).unwrap();
    assert!(m.is_empty());
    assert_eq!(m.dim, 4);
}

#[test]
fn broken_image_reports_sample_id() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fx::write_two_class_dataset(&data, 3);
    let bb = load_color(&dir.path().join("bb"));
    let mut manifest = dataset::stratified_split(&dataset::ingest(&data).unwrap().manifest, Default::default(), 1).unwrap();
    let victim = manifest.samples.iter_mut().find(|s| s.split == Split::Test).unwrap();
    std::fs::write(&victim.path, b"not an image").unwrap();
    let id = victim.id.clone();
    match bb.extract(&manifest, Split::Test).unwrap_err() {
        Error::Sample { sample, .. } => assert_eq!(sample, id),
        other => panic!("{other}"),
    }
}
