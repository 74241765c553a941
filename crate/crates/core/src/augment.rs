//! Seeded geometric augmentation of the training split.
//!
//! Each variant applies, in this order: a rotation about the image centre, a
//! zoom about the centre, a translation, then independent horizontal and
//! vertical flips. Pixels are pulled back through the inverse transform and
//! sampled bilinearly; coordinates outside the source clamp to the nearest
//! edge.

use std::fs;
use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, Sample, Split};
use crate::error::{Error, Result};
use crate::{par, seeding};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub rotation_range_degrees: f64,
    pub zoom_range: f64,
    /// Fraction of the image width.
    pub width_shift_range: f64,
    /// Fraction of the image height.
    pub height_shift_range: f64,
    pub vertical_flip: bool,
    pub horizontal_flip: bool,
    /// Outer loop count.
    pub iterations: usize,
    /// Variants generated per source image per iteration.
    pub copies_per_image: usize,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            rotation_range_degrees: 30.0,
            zoom_range: 0.2,
            width_shift_range: 0.2,
            height_shift_range: 0.2,
            vertical_flip: true,
            horizontal_flip: true,
            iterations: 1,
            copies_per_image: 6,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// No geometric change and no flips; `iterations` and copies are kept.
    pub fn identity(&self) -> Self {
        AugmentationConfig {
            rotation_range_degrees: 0.0,
            zoom_range: 0.0,
            width_shift_range: 0.0,
            height_shift_range: 0.0,
            vertical_flip: false,
            horizontal_flip: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !(self.rotation_range_degrees >= 0.0 && self.rotation_range_degrees.is_finite()) {
            return Err(Error::Config("rotation range must be >= 0".into()));
        }
        if !unit(self.zoom_range) || !unit(self.width_shift_range) || !unit(self.height_shift_range)
        {
            return Err(Error::Config(
                "zoom and shift ranges must lie in [0, 1)".into(),
            ));
        }
        if self.copies_per_image == 0 {
            return Err(Error::Config("copies per image must be >= 1".into()));
        }
        Ok(())
    }

    /// Size of the training split after augmentation.
    pub fn expanded_count(&self, train: usize) -> usize {
        train * (1 + self.iterations * self.copies_per_image)
    }
}

/// One concrete draw of transform parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TransformParams {
    pub rotation_degrees: f64,
    pub scale: f64,
    /// Pixels, positive to the right.
    pub shift_x: f64,
    /// Pixels, positive downward.
    pub shift_y: f64,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
}

impl TransformParams {
    pub fn identity() -> Self {
        TransformParams {
            scale: 1.0,
            ..Default::default()
        }
    }

    /// Always consumes six uniforms so disabled transforms do not shift the
    /// stream seen by enabled ones.
    pub fn draw<R: Rng + ?Sized>(
        config: &AugmentationConfig,
        width: u32,
        height: u32,
        rng: &mut R,
    ) -> Self {
        let mut symmetric = |range: f64| (2.0 * rng.random::<f64>() - 1.0) * range;
        let rotation_degrees = symmetric(config.rotation_range_degrees);
        let scale = 1.0 + symmetric(config.zoom_range);
        let shift_x = symmetric(config.width_shift_range) * f64::from(width);
        let shift_y = symmetric(config.height_shift_range) * f64::from(height);
        let flip_horizontal = rng.random::<f64>() < 0.5 && config.horizontal_flip;
        let flip_vertical = rng.random::<f64>() < 0.5 && config.vertical_flip;
        TransformParams {
            rotation_degrees,
            scale,
            shift_x,
            shift_y,
            flip_horizontal,
            flip_vertical,
        }
    }
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

fn sample_bilinear(image: &RgbImage, x: f64, y: f64) -> Rgb<u8> {
    let (w, h) = image.dimensions();
    let x = x.clamp(0.0, f64::from(w - 1));
    let y = y.clamp(0.0, f64::from(h - 1));
    let x0 = x.floor() as u32;
    let y0 = y.floor() as u32;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = (x - f64::from(x0)) as f32;
    let fy = (y - f64::from(y0)) as f32;
    let (p00, p10) = (image.get_pixel(x0, y0), image.get_pixel(x1, y0));
    let (p01, p11) = (image.get_pixel(x0, y1), image.get_pixel(x1, y1));
    let mut out = [0u8; 3];
    for c in 0..3 {
        let top = lerp(f32::from(p00[c]), f32::from(p10[c]), fx);
        let bottom = lerp(f32::from(p01[c]), f32::from(p11[c]), fx);
        out[c] = lerp(top, bottom, fy).round().clamp(0.0, 255.0) as u8;
    }
    Rgb(out)
}

/// Applies `params` to `image`; output has the input's dimensions.
pub fn apply(image: &RgbImage, params: &TransformParams) -> Result<RgbImage> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::EmptyImage);
    }
    let cx = f64::from(w - 1) / 2.0;
    let cy = f64::from(h - 1) / 2.0;
    let (sin, cos) = params.rotation_degrees.to_radians().sin_cos();
    let last_x = f64::from(w - 1);
    let last_y = f64::from(h - 1);

    Ok(RgbImage::from_fn(w, h, |ox, oy| {
        // Undo flips, shift, zoom, rotation in reverse order.
        let mut x = f64::from(ox);
        let mut y = f64::from(oy);
        if params.flip_horizontal {
            x = last_x - x;
        }
        if params.flip_vertical {
            y = last_y - y;
        }
        x -= params.shift_x;
        y -= params.shift_y;
        let dx = (x - cx) / params.scale;
        let dy = (y - cy) / params.scale;
        let sx = cx + (cos * dx + sin * dy);
        let sy = cy + (-sin * dx + cos * dy);
        sample_bilinear(image, sx, sy)
    }))
}

/// Draws transform parameters from `rng` and applies them.
pub fn augment_image<R: Rng + ?Sized>(
    image: &RgbImage,
    config: &AugmentationConfig,
    rng: &mut R,
) -> Result<RgbImage> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::EmptyImage);
    }
    let params = TransformParams::draw(config, w, h, rng);
    apply(image, &params)
}

/// Seed of the `copy`-th variant in `iteration` for the sample `id`.
pub fn draw_seed(master: u64, id: &str, iteration: usize, copy: usize) -> u64 {
    seeding::derive(master, &[seeding::key_of(id), iteration as u64, copy as u64])
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c == '/' || c == '\\' { '_' } else { c })
        .collect()
}

fn expand_sample(
    sample: &Sample,
    config: &AugmentationConfig,
    out: &Path,
) -> Result<Vec<Sample>> {
    let class_dir = out.join(format!("{:03}", sample.label));
    fs::create_dir_all(&class_dir).map_err(|e| Error::io(&class_dir, e))?;

    let stem = file_stem(&sample.id);
    let copy_path = class_dir.join(&stem);
    fs::copy(&sample.path, &copy_path).map_err(|e| Error::io(&sample.path, e))?;
    let mut produced = vec![Sample {
        path: copy_path.to_string_lossy().into_owned(),
        ..sample.clone()
    }];

    if config.iterations == 0 {
        return Ok(produced);
    }
    let source = image::open(&sample.path)
        .map_err(|e| Error::Sample {
            sample: sample.id.clone(),
            reason: e.to_string(),
        })?
        .to_rgb8();

    for iteration in 0..config.iterations {
        for copy in 0..config.copies_per_image {
            let seed = draw_seed(config.seed, &sample.id, iteration, copy);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let variant = augment_image(&source, config, &mut rng).map_err(|e| Error::Sample {
                sample: sample.id.clone(),
                reason: e.to_string(),
            })?;
            let path = class_dir.join(format!("{stem}_aug{iteration}-{copy}.png"));
            variant.save_with_format(&path, ImageFormat::Png)?;
            produced.push(Sample {
                id: format!("{}#aug{iteration}.{copy}", sample.id),
                path: path.to_string_lossy().into_owned(),
                label: sample.label,
                split: Split::Train,
                source_id: Some(sample.id.clone()),
                draw_seed: Some(seed),
            });
        }
    }
    Ok(produced)
}

/// Copies every training image into `out` and adds `iterations *
/// copies_per_image` variants per image. Validation and test samples pass
/// through untouched, in their original positions.
pub fn augment_split(
    manifest: &DatasetManifest,
    config: &AugmentationConfig,
    out: &Path,
) -> Result<DatasetManifest> {
    config.validate()?;
    let train: Vec<&Sample> = manifest.split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Empty("train split"));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut expanded = par::try_map(&train, |_, s| expand_sample(s, config, out))?.into_iter();
    let mut samples = Vec::with_capacity(config.expanded_count(train.len()) + manifest.samples.len());
    for s in &manifest.samples {
        if s.split == Split::Train {
            samples.extend(expanded.next().expect("one expansion per train sample"));
        } else {
            samples.push(s.clone());
        }
    }
    Ok(DatasetManifest {
        samples,
        ..manifest.clone()
    })
}
