//! Frozen feature extraction.
//!
//! A backbone is an ONNX graph taking one `1x3xSxS` f32 image and emitting a
//! pooled `(1, D)` feature vector, plus a JSON sidecar describing its name,
//! `D` and input normalization. Extracted features are persisted as a
//! [`FeatureMatrix`] so tuning never has to rerun the backbone.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::DynamicImage;
use serde::{Deserialize, Serialize};
use tract_onnx::prelude::*;

use crate::dataset::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::par;
use crate::provenance::Provenance;

pub const INPUT_SIZE: u32 = 224;
pub const FEATURE_MAGIC: &[u8; 8] = b"PPNFEAT1";

/// Pooled feature width of the pretrained backbones the pipeline was built
/// around; a sidecar naming one of these must agree.
pub fn known_feature_dim(name: &str) -> Option<usize> {
    match name {
        "MobileNetV2" => Some(1280),
        "NASNetLarge" => Some(4032),
        "Xception" => Some(2048),
        "DenseNet201" => Some(1920),
        "InceptionV3" => Some(2048),
        _ => None,
    }
}

/// Input normalization applied after resizing. Pixel values are on a
/// 0..=255 scale beforehand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Preprocessing {
    /// `v / 127.5 - 1`
    #[serde(rename = "scale_minus1_1")]
    ScaleMinusOneOne,
    /// `v / 255`
    #[serde(rename = "scale_0_1")]
    ScaleZeroOne,
    /// `(v / 255 - mean[c]) / std[c]`
    #[serde(rename = "mean_std")]
    MeanStd { mean: [f32; 3], std: [f32; 3] },
}

impl Preprocessing {
    fn apply(&self, channel: usize, v: f32) -> f32 {
        match self {
            Preprocessing::ScaleMinusOneOne => v / 127.5 - 1.0,
            Preprocessing::ScaleZeroOne => v / 255.0,
            Preprocessing::MeanStd { mean, std } => (v / 255.0 - mean[channel]) / std[channel],
        }
    }
}

/// The sidecar JSON written next to an exported graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub name: String,
    pub feature_dim: usize,
    pub preprocessing: Preprocessing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub graph_path: PathBuf,
    pub feature_dim: usize,
    pub input_size: u32,
    pub preprocessing: Preprocessing,
}

impl BackboneSpec {
    pub fn from_sidecar(graph_path: &Path, sidecar_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text)?;
        let spec = BackboneSpec {
            name: sidecar.name,
            graph_path: graph_path.to_owned(),
            feature_dim: sidecar.feature_dim,
            input_size: INPUT_SIZE,
            preprocessing: sidecar.preprocessing,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Sidecar next to a graph: `model.onnx` -> `model.json`.
    pub fn sidecar_path(graph_path: &Path) -> PathBuf {
        graph_path.with_extension("json")
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.input_size == 0 {
            return Err(Error::Config(format!(
                "backbone `{}` needs positive feature_dim and input_size",
                self.name
            )));
        }
        if let Some(expected) = known_feature_dim(&self.name) {
            if expected != self.feature_dim {
                return Err(Error::KnownBackboneDim {
                    name: self.name.clone(),
                    expected,
                    declared: self.feature_dim,
                });
            }
        }
        Ok(())
    }
}

/// Bilinear resize with half-pixel centres, producing a planar `3 x out x out`
/// buffer. `pixels` is interleaved RGB, `width x height`.
pub fn resize_bilinear(pixels: &[f32], width: usize, height: usize, out: usize) -> Vec<f32> {
    let axis = |len_in: usize, len_out: usize| -> Vec<(usize, usize, f32)> {
        let ratio = len_in as f64 / len_out as f64;
        (0..len_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (len_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(len_in - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let xs = axis(width, out);
    let ys = axis(height, out);
    let at = |x: usize, y: usize, c: usize| pixels[(y * width + x) * 3 + c];
    let lerp = |a: f32, b: f32, t: f32| a + t * (b - a);

    let mut planar = vec![0f32; 3 * out * out];
    for c in 0..3 {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = lerp(at(x0, y0, c), at(x1, y0, c), fx);
                let bottom = lerp(at(x0, y1, c), at(x1, y1, c), fx);
                planar[(c * out + oy) * out + ox] = lerp(top, bottom, fy);
            }
        }
    }
    planar
}

/// Resizes `image` to the backbone's input size and normalizes it. Output is
/// planar RGB (`CHW`).
pub fn preprocess(image: &DynamicImage, spec: &BackboneSpec) -> Result<Vec<f32>> {
    let (width, height) = (image.width() as usize, image.height() as usize);
    if width == 0 || height == 0 {
        return Err(Error::EmptyImage);
    }
    let pixels: Vec<f32> = match image {
        DynamicImage::ImageRgb32F(_) | DynamicImage::ImageRgba32F(_) => image
            .to_rgb32f()
            .into_raw()
            .into_iter()
            .map(|v| v * 255.0)
            .collect(),
        _ => image.to_rgb8().into_raw().into_iter().map(f32::from).collect(),
    };
    let size = spec.input_size as usize;
    let mut planar = resize_bilinear(&pixels, width, height, size);
    let plane = size * size;
    for (i, v) in planar.iter_mut().enumerate() {
        *v = spec.preprocessing.apply(i / plane, *v);
    }
    Ok(planar)
}

/// A loaded backbone graph. Immutable and shareable across threads.
#[derive(Debug, Clone)]
pub struct Backbone {
    spec: BackboneSpec,
    plan: Arc<TypedSimplePlan>,
}

fn onnx_err(e: impl std::fmt::Display) -> Error {
    Error::Onnx(e.to_string())
}

impl Backbone {
    pub fn load(spec: BackboneSpec) -> Result<Self> {
        spec.validate()?;
        let s = spec.input_size as usize;
        let model = tract_onnx::onnx()
            .model_for_path(&spec.graph_path)
            .map_err(onnx_err)?
            .with_input_fact(0, f32::fact([1, 3, s, s]).into())
            .map_err(onnx_err)?
            .into_optimized()
            .map_err(onnx_err)?;
        let fact = model.output_fact(0).map_err(onnx_err)?;
        let dims = fact
            .shape
            .as_concrete()
            .ok_or_else(|| Error::Onnx("graph output shape is not concrete".into()))?;
        let graph_dim = match dims {
            [1, d] => *d,
            other => {
                return Err(Error::Onnx(format!(
                    "graph output must have shape (1, D), found {other:?}"
                )))
            }
        };
        if graph_dim != spec.feature_dim {
            return Err(Error::FeatureDimMismatch {
                graph: graph_dim,
                declared: spec.feature_dim,
            });
        }
        let plan = model.into_runnable().map_err(onnx_err)?;
        Ok(Backbone { spec, plan })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    /// Runs the graph on an already preprocessed planar input.
    pub fn run(&self, planar: Vec<f32>) -> Result<Vec<f32>> {
        let s = self.spec.input_size as usize;
        let input = Tensor::from_shape(&[1, 3, s, s], &planar).map_err(onnx_err)?;
        let outputs = self.plan.run(tvec!(input.into())).map_err(onnx_err)?;
        let view = outputs[0].to_plain_array_view::<f32>().map_err(onnx_err)?;
        let values: Vec<f32> = view.iter().copied().collect();
        if values.len() != self.spec.feature_dim {
            return Err(Error::FeatureDimMismatch {
                graph: values.len(),
                declared: self.spec.feature_dim,
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Onnx("backbone produced non-finite features".into()));
        }
        Ok(values)
    }

    pub fn features(&self, image: &DynamicImage) -> Result<Vec<f32>> {
        self.run(preprocess(image, &self.spec)?)
    }

    pub fn features_for_path(&self, path: &Path) -> Result<Vec<f32>> {
        let image = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?
            .decode()?;
        self.features(&image)
    }

    /// One feature row per sample of `split`, in manifest order.
    pub fn extract(&self, manifest: &DatasetManifest, split: Split) -> Result<FeatureMatrix> {
        let samples: Vec<_> = manifest.split(split).collect();
        let rows = par::try_map(&samples, |_, s| {
            self.features_for_path(Path::new(&s.path))
                .map_err(|e| Error::Sample {
                    sample: s.id.clone(),
                    reason: e.to_string(),
                })
        })?;
        let mut matrix = FeatureMatrix::empty(&self.spec.name, split, self.spec.feature_dim);
        for (s, row) in samples.iter().zip(rows) {
            matrix.push(&s.id, s.label as u32, &row)?;
        }
        Ok(matrix)
    }
}

/// Features for one split, row-major `N x D`, with labels and sample ids.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub backbone: String,
    pub split: Split,
    pub dim: usize,
    pub values: Vec<f32>,
    pub labels: Vec<u32>,
    pub sample_ids: Vec<String>,
    pub provenance: Option<Provenance>,
}

#[derive(Serialize, Deserialize)]
struct FeatureSidecar {
    backbone: String,
    split: Split,
    dim: usize,
    sample_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

impl FeatureMatrix {
    pub fn empty(backbone: &str, split: Split, dim: usize) -> Self {
        FeatureMatrix {
            backbone: backbone.to_owned(),
            split,
            dim,
            values: Vec::new(),
            labels: Vec::new(),
            sample_ids: Vec::new(),
            provenance: None,
        }
    }

    pub fn push(&mut self, sample_id: &str, label: u32, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                actual: row.len(),
            });
        }
        self.values.extend_from_slice(row);
        self.labels.push(label);
        self.sample_ids.push(sample_id.to_owned());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.dim.max(1)).take(self.len())
    }

    /// Sidecar JSON path for a feature file: `train.feat` -> `train.feat.json`.
    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut name = path.as_os_str().to_owned();
        name.push(".json");
        PathBuf::from(name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let name = self.backbone.as_bytes();
        let mut out = Vec::with_capacity(8 + 12 + name.len() + 4 * (self.values.len() + self.len()));
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    /// Parses the binary part; split, ids and provenance come from the sidecar.
    pub fn from_bytes(mut bytes: &[u8]) -> Result<(String, usize, Vec<f32>, Vec<u32>)> {
        let bad = |what: &str| Error::FeatureFormat(what.to_owned());
        let mut magic = [0u8; 8];
        bytes.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != FEATURE_MAGIC {
            return Err(bad("bad magic"));
        }
        let read_u32 = |bytes: &mut &[u8]| -> Result<u32> {
            let mut b = [0u8; 4];
            bytes.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
            Ok(u32::from_le_bytes(b))
        };
        let name_len = read_u32(&mut bytes)? as usize;
        if bytes.len() < name_len {
            return Err(bad("truncated backbone name"));
        }
        let (name, rest) = bytes.split_at(name_len);
        let name = String::from_utf8(name.to_vec()).map_err(|_| bad("backbone name is not UTF-8"))?;
        bytes = rest;
        let dim = read_u32(&mut bytes)? as usize;
        let n = read_u32(&mut bytes)? as usize;
        let expected = (n * dim + n) * 4;
        if bytes.len() != expected {
            return Err(Error::FeatureFormat(format!(
                "expected {expected} payload bytes for N = {n}, D = {dim}, found {}",
                bytes.len()
            )));
        }
        let (floats, labels) = bytes.split_at(n * dim * 4);
        let values = floats
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let labels = labels
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((name, dim, values, labels))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let sidecar = FeatureSidecar {
            backbone: self.backbone.clone(),
            split: self.split,
            dim: self.dim,
            sample_ids: self.sample_ids.clone(),
            provenance: self.provenance.clone(),
        };
        let side = Self::sidecar_path(path);
        let mut text = serde_json::to_string_pretty(&sidecar)?;
        text.push('\n');
        fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (backbone, dim, values, labels) = Self::from_bytes(&bytes)?;
        let side = Self::sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: FeatureSidecar = serde_json::from_str(&text)?;
        if sidecar.backbone != backbone || sidecar.dim != dim {
            return Err(Error::FeatureFormat(format!(
                "sidecar describes `{}` (D = {}) but binary holds `{backbone}` (D = {dim})",
                sidecar.backbone, sidecar.dim
            )));
        }
        if sidecar.sample_ids.len() != labels.len() {
            return Err(Error::Length {
                left: sidecar.sample_ids.len(),
                right: labels.len(),
            });
        }
        Ok(FeatureMatrix {
            backbone,
            split: sidecar.split,
            dim,
            values,
            labels,
            sample_ids: sidecar.sample_ids,
            provenance: sidecar.provenance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb32FImage, RgbImage};

    fn spec(preprocessing: Preprocessing) -> BackboneSpec {
        BackboneSpec {
            name: "test".into(),
            graph_path: PathBuf::new(),
            feature_dim: 4,
            input_size: INPUT_SIZE,
            preprocessing,
        }
    }

    #[test]
    fn mid_gray_maps_to_zero() {
        let img = DynamicImage::ImageRgb32F(Rgb32FImage::from_pixel(13, 9, image::Rgb([0.5; 3])));
        let out = preprocess(&img, &spec(Preprocessing::ScaleMinusOneOne)).unwrap();
        assert_eq!(out.len(), 3 * 224 * 224);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn black_maps_to_zero() {
        let img = DynamicImage::ImageRgb8(RgbImage::new(5, 7));
        let out = preprocess(&img, &spec(Preprocessing::ScaleZeroOne)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mean_std_is_per_channel() {
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(2, 2, image::Rgb([255, 0, 51])));
        let p = Preprocessing::MeanStd {
            mean: [0.5, 0.0, 0.2],
            std: [0.5, 1.0, 0.1],
        };
        let out = preprocess(&img, &spec(p)).unwrap();
        let plane = 224 * 224;
        assert!((out[0] - 1.0).abs() < 1e-6);
        assert!(out[plane].abs() < 1e-6);
        assert!(out[2 * plane].abs() < 1e-5);
    }

    #[test]
    fn known_dims_are_enforced() {
        let mut s = spec(Preprocessing::ScaleZeroOne);
        s.name = "InceptionV3".into();
        assert!(matches!(s.validate(), Err(Error::KnownBackboneDim { expected: 2048, .. })));
        s.feature_dim = 2048;
        assert!(s.validate().is_ok());
    }

    #[test]
    fn sidecar_json_shape() {
        let side = Sidecar {
            name: "MobileNetV2".into(),
            feature_dim: 1280,
            preprocessing: Preprocessing::ScaleMinusOneOne,
        };
        let text = serde_json::to_string(&side).unwrap();
        assert_eq!(
            text,
            r#"{"name":"MobileNetV2","feature_dim":1280,"preprocessing":"scale_minus1_1"}"#
        );
        let ms: Preprocessing =
            serde_json::from_str(r#"{"mean_std":{"mean":[0.485,0.456,0.406],"std":[0.229,0.224,0.225]}}"#)
                .unwrap();
        assert!(matches!(ms, Preprocessing::MeanStd { .. }));
    }

    #[test]
    fn truncated_feature_file_is_rejected() {
        let mut m = FeatureMatrix::empty("b", Split::Train, 2);
        m.push("a", 1, &[1.0, 2.0]).unwrap();
        let bytes = m.to_bytes();
        assert!(FeatureMatrix::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(FeatureMatrix::from_bytes(&wrong).is_err());
        let (name, dim, values, labels) = FeatureMatrix::from_bytes(&bytes).unwrap();
        assert_eq!((name.as_str(), dim, values, labels), ("b", 2, vec![1.0, 2.0], vec![1]));
    }

    #[test]
    fn push_checks_width() {
        let mut m = FeatureMatrix::empty("b", Split::Train, 3);
        assert!(matches!(m.push("x", 0, &[1.0]), Err(Error::Dimension { expected: 3, actual: 1 })));
    }
}
