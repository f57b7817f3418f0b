//! Severity-graded corruption kernels and corrupted-dataset materialization.
//!
//! Each kind has one scalar strength parameter per severity level, fixed in
//! [`severity_param`]. Every kernel is a pure function of the image, the
//! parameter, and a seeded RNG, and clamps its output to `[0, 1]`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{self, LabeledDataset, Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::imgcore::resample::{reflect_index, sample_bilinear};
use crate::imgcore::{apply_transform, clamp_unit, ppm, Image, Transform};
use crate::seed;

/// Bump when any table entry or kernel changes.
pub const SEVERITY_TABLE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    MotionBlur,
    ZoomBlur,
    Contrast,
    Brightness,
    Pixelate,
    SpeckleNoise,
    GaussianBlur,
    Saturate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 12] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::MotionBlur,
        CorruptionKind::ZoomBlur,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
        CorruptionKind::Pixelate,
        CorruptionKind::SpeckleNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Saturate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::ZoomBlur => "zoom_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::SpeckleNoise => "speckle_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Saturate => "saturate",
        }
    }

    pub fn index(self) -> u64 {
        CorruptionKind::ALL.iter().position(|&k| k == self).unwrap() as u64
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::param(format!("unknown corruption kind `{s}`")))
    }
}

/// Kinds used to perturb predictor training data, and kinds reserved for
/// evaluating generalization to unseen corruptions. Disjoint.
pub fn corruption_sets() -> (Vec<CorruptionKind>, Vec<CorruptionKind>) {
    use CorruptionKind::*;
    (
        vec![
            GaussianNoise,
            ShotNoise,
            ImpulseNoise,
            DefocusBlur,
            MotionBlur,
            ZoomBlur,
            Contrast,
            Brightness,
            Pixelate,
        ],
        vec![SpeckleNoise, GaussianBlur, Saturate],
    )
}

pub fn training_kinds() -> Vec<CorruptionKind> {
    corruption_sets().0
}

pub fn held_out_kinds() -> Vec<CorruptionKind> {
    corruption_sets().1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        check_severity(severity)?;
        Ok(Self {
            kind,
            severity,
            seed,
        })
    }
}

fn check_severity(severity: u8) -> Result<()> {
    if (1..=5).contains(&severity) {
        Ok(())
    } else {
        Err(Error::param(format!("severity {severity} not in 1..=5")))
    }
}

/// Strength parameter of `kind` at `severity` (1..=5).
///
/// | kind           | parameter                    | severities 1..5               |
/// |----------------|------------------------------|-------------------------------|
/// | gaussian_noise | std σ                        | .04 .07 .10 .13 .17           |
/// | shot_noise     | photon rate λ (lower=worse)  | 500 250 100 75 50             |
/// | impulse_noise  | replaced fraction p          | .01 .02 .05 .08 .12           |
/// | defocus_blur   | disk radius (px)             | 1.0 1.5 2.0 2.5 3.0           |
/// | motion_blur    | line length (px)             | 3 5 7 9 11                    |
/// | zoom_blur      | largest zoom                 | 1.06 1.11 1.16 1.21 1.26      |
/// | contrast       | contrast factor (lower=worse)| .75 .5 .4 .3 .15              |
/// | brightness     | additive offset              | .05 .1 .15 .2 .3              |
/// | pixelate       | block size (px)              | 2 3 4 5 6                     |
/// | speckle_noise  | multiplicative std           | .06 .10 .12 .16 .20           |
/// | gaussian_blur  | std (px)                     | .4 .6 .7 .8 1.0               |
/// | saturate       | color blend factor           | 1.5 2 3 4 5                   |
pub fn severity_param(kind: CorruptionKind, severity: u8) -> Result<f32> {
    check_severity(severity)?;
    let table: [f32; 5] = match kind {
        CorruptionKind::GaussianNoise => [0.04, 0.07, 0.10, 0.13, 0.17],
        CorruptionKind::ShotNoise => [500.0, 250.0, 100.0, 75.0, 50.0],
        CorruptionKind::ImpulseNoise => [0.01, 0.02, 0.05, 0.08, 0.12],
        CorruptionKind::DefocusBlur => [1.0, 1.5, 2.0, 2.5, 3.0],
        CorruptionKind::MotionBlur => [3.0, 5.0, 7.0, 9.0, 11.0],
        CorruptionKind::ZoomBlur => [1.06, 1.11, 1.16, 1.21, 1.26],
        CorruptionKind::Contrast => [0.75, 0.5, 0.4, 0.3, 0.15],
        CorruptionKind::Brightness => [0.05, 0.1, 0.15, 0.2, 0.3],
        CorruptionKind::Pixelate => [2.0, 3.0, 4.0, 5.0, 6.0],
        CorruptionKind::SpeckleNoise => [0.06, 0.10, 0.12, 0.16, 0.20],
        CorruptionKind::GaussianBlur => [0.4, 0.6, 0.7, 0.8, 1.0],
        CorruptionKind::Saturate => [1.5, 2.0, 3.0, 4.0, 5.0],
    };
    Ok(table[usize::from(severity) - 1])
}

/// Applies the corruption described by `spec`. Deterministic in `(img, spec)`.
pub fn apply_corruption(img: &Image, spec: &CorruptionSpec) -> Result<Image> {
    let param = severity_param(spec.kind, spec.severity)?;
    let mut rng = seed::rng_for(&[spec.seed, spec.kind.index(), u64::from(spec.severity)]);
    corrupt_with_param(img, spec.kind, param, &mut rng)
}

/// Runs one kernel with an explicit strength parameter.
pub fn corrupt_with_param(
    img: &Image,
    kind: CorruptionKind,
    param: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Image> {
    if !param.is_finite() && !(kind == CorruptionKind::ShotNoise && param == f32::INFINITY) {
        return Err(Error::param(format!("{kind}: non-finite parameter")));
    }
    let out = match kind {
        CorruptionKind::GaussianNoise => gaussian_noise(img, param, rng)?,
        CorruptionKind::ShotNoise => shot_noise(img, param, rng)?,
        CorruptionKind::ImpulseNoise => impulse_noise(img, param, rng)?,
        CorruptionKind::DefocusBlur => defocus_blur(img, param),
        CorruptionKind::MotionBlur => motion_blur(img, param, rng),
        CorruptionKind::ZoomBlur => zoom_blur(img, param),
        CorruptionKind::Contrast => contrast(img, param),
        CorruptionKind::Brightness => img.map_clamped(|v| v + param),
        CorruptionKind::Pixelate => pixelate(img, param)?,
        CorruptionKind::SpeckleNoise => speckle_noise(img, param, rng)?,
        CorruptionKind::GaussianBlur => gaussian_blur(img, param),
        CorruptionKind::Saturate => apply_transform(img, &Transform::color(param))?,
    };
    Ok(out)
}

fn normal(sigma: f32) -> Result<Normal<f32>> {
    Normal::new(0.0, sigma).map_err(|e| Error::param(format!("noise std {sigma}: {e}")))
}

fn gaussian_noise(img: &Image, sigma: f32, rng: &mut ChaCha8Rng) -> Result<Image> {
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let dist = normal(sigma)?;
    Ok(Image::from_parts(
        img.height(),
        img.width(),
        img.channels(),
        img.data()
            .iter()
            .map(|&v| clamp_unit(v + dist.sample(rng)))
            .collect(),
    ))
}

fn speckle_noise(img: &Image, sigma: f32, rng: &mut ChaCha8Rng) -> Result<Image> {
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let dist = normal(sigma)?;
    Ok(Image::from_parts(
        img.height(),
        img.width(),
        img.channels(),
        img.data()
            .iter()
            .map(|&v| clamp_unit(v + v * dist.sample(rng)))
            .collect(),
    ))
}

fn shot_noise(img: &Image, rate: f32, rng: &mut ChaCha8Rng) -> Result<Image> {
    if rate == f32::INFINITY {
        return Ok(img.clone());
    }
    if rate <= 0.0 {
        return Err(Error::param(format!(
            "shot noise rate {rate} must be positive"
        )));
    }
    let rate = f64::from(rate);
    let mut data = Vec::with_capacity(img.data().len());
    for &v in img.data() {
        let lambda = rate * f64::from(v);
        let count = if lambda > 0.0 {
            Poisson::new(lambda)
                .map_err(|e| Error::param(e.to_string()))?
                .sample(rng)
        } else {
            0.0
        };
        data.push(clamp_unit((count / rate) as f32));
    }
    Ok(Image::from_parts(
        img.height(),
        img.width(),
        img.channels(),
        data,
    ))
}

fn impulse_noise(img: &Image, fraction: f32, rng: &mut ChaCha8Rng) -> Result<Image> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::param(format!(
            "impulse fraction {fraction} not in [0, 1]"
        )));
    }
    if fraction == 0.0 {
        return Ok(img.clone());
    }
    let data = img
        .data()
        .iter()
        .map(|&v| {
            if rng.random::<f32>() < fraction {
                if rng.random::<bool>() {
                    1.0
                } else {
                    0.0
                }
            } else {
                v
            }
        })
        .collect();
    Ok(Image::from_parts(
        img.height(),
        img.width(),
        img.channels(),
        data,
    ))
}

/// Convolution with an explicit list of `(dy, dx, weight)` taps, reflect border.
fn convolve_taps(img: &Image, taps: &[(isize, isize, f32)]) -> Image {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let src = img.data();
    let mut data = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * c;
            for &(dy, dx, wt) in taps {
                let sy = reflect_index(y as isize + dy, h);
                let sx = reflect_index(x as isize + dx, w);
                let sb = (sy * w + sx) * c;
                for ch in 0..c {
                    data[base + ch] += wt * src[sb + ch];
                }
            }
            for v in &mut data[base..base + c] {
                *v = clamp_unit(*v);
            }
        }
    }
    Image::from_parts(h, w, c, data)
}

fn defocus_blur(img: &Image, radius: f32) -> Image {
    let r = radius.max(0.0);
    let reach = r.floor() as isize;
    let mut taps = Vec::new();
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            if ((dy * dy + dx * dx) as f32) <= r * r {
                taps.push((dy, dx, 1.0));
            }
        }
    }
    let n = taps.len() as f32;
    taps.iter_mut().for_each(|t| t.2 /= n);
    convolve_taps(img, &taps)
}

fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let reach = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f32> = (-reach..=reach)
        .map(|d| (-((d * d) as f32) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = weights.iter().sum();
    let horiz: Vec<_> = (-reach..=reach)
        .zip(&weights)
        .map(|(d, &w)| (0, d, w / total))
        .collect();
    let vert: Vec<_> = (-reach..=reach)
        .zip(&weights)
        .map(|(d, &w)| (d, 0, w / total))
        .collect();
    convolve_taps(&convolve_taps(img, &horiz), &vert)
}

fn motion_blur(img: &Image, length: f32, rng: &mut ChaCha8Rng) -> Image {
    let steps = length.round().max(1.0) as usize;
    if steps == 1 {
        return img.clone();
    }
    let angle = rng.random_range(0.0..std::f32::consts::PI);
    let (s, c) = angle.sin_cos();
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let half = (steps as f32 - 1.0) / 2.0;
    let mut data = vec![0.0f32; h * w * ch];
    let mut px = [0.0f32; 3];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * ch;
            for k in 0..steps {
                let t = k as f32 - half;
                sample_bilinear(img, y as f32 + t * s, x as f32 + t * c, &mut px);
                for i in 0..ch {
                    data[base + i] += px[i];
                }
            }
            for v in &mut data[base..base + ch] {
                *v = clamp_unit(*v / steps as f32);
            }
        }
    }
    Image::from_parts(h, w, ch, data)
}

fn zoom_blur(img: &Image, max_zoom: f32) -> Image {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let zooms: Vec<f32> = (0..)
        .map(|i| 1.0 + 0.01 * i as f32)
        .take_while(|&z| z <= max_zoom + 1e-4)
        .collect();
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let mut data = vec![0.0f32; h * w * ch];
    let mut px = [0.0f32; 3];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * ch;
            for &z in &zooms {
                sample_bilinear(
                    img,
                    cy + (y as f32 - cy) / z,
                    cx + (x as f32 - cx) / z,
                    &mut px,
                );
                for i in 0..ch {
                    data[base + i] += px[i];
                }
            }
            for v in &mut data[base..base + ch] {
                *v = clamp_unit(*v / zooms.len() as f32);
            }
        }
    }
    Image::from_parts(h, w, ch, data)
}

fn contrast(img: &Image, factor: f32) -> Image {
    let mean = img.data().iter().map(|&v| f64::from(v)).sum::<f64>() / img.data().len() as f64;
    let mean = mean as f32;
    img.map_clamped(|v| (v - mean) * factor + mean)
}

/// Nearest-neighbour down/up sampling with `block × block` cells; each cell
/// takes the value of its centre sample.
fn pixelate(img: &Image, block: f32) -> Result<Image> {
    if block < 1.0 || block.fract() != 0.0 {
        return Err(Error::param(format!(
            "pixelate block {block} must be a positive integer"
        )));
    }
    let d = block as usize;
    if d == 1 {
        return Ok(img.clone());
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut data = Vec::with_capacity(img.data().len());
    for y in 0..h {
        let sy = ((y / d) * d + d / 2).min(h - 1);
        for x in 0..w {
            let sx = ((x / d) * d + d / 2).min(w - 1);
            let base = (sy * w + sx) * c;
            data.extend_from_slice(&img.data()[base..base + c]);
        }
    }
    Ok(Image::from_parts(h, w, c, data))
}

/// Storage layout for materialized corrupted datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    /// One PPM file per image, grouped in a directory per `(kind, severity)`.
    Ppm,
    /// One 3073-byte-record binary file per `(kind, severity)` (32×32×3 only).
    Binary,
}

/// Per-image seed for corrupting image `index` under `spec`.
pub fn image_seed(dataset_seed: u64, index: usize, kind: CorruptionKind, severity: u8) -> u64 {
    seed::derive_seed(&[
        dataset_seed,
        index as u64,
        kind.index(),
        u64::from(severity),
    ])
}

/// Corrupts one image of a dataset with its derived per-image seed.
pub fn corrupt_image(
    img: &Image,
    dataset_seed: u64,
    index: usize,
    kind: CorruptionKind,
    severity: u8,
) -> Result<Image> {
    let spec = CorruptionSpec::new(
        kind,
        severity,
        image_seed(dataset_seed, index, kind, severity),
    )?;
    apply_corruption(img, &spec)
}

/// Corrupted copy of a whole dataset for one `(kind, severity)`; the spec's
/// `seed` acts as the dataset seed.
pub fn corrupt_in_memory(data: &LabeledDataset, spec: &CorruptionSpec) -> Result<LabeledDataset> {
    let images = data
        .images
        .par_iter()
        .enumerate()
        .map(|(i, img)| corrupt_image(img, spec.seed, i, spec.kind, spec.severity))
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(
        images,
        data.labels.clone(),
        data.class_count,
        data.ids.clone(),
    )
}

/// Materializes one corrupted copy of `data` per spec under `out` and writes
/// `out/manifest.tsv`. Paths in the manifest are relative to `out`.
pub fn corrupt_dataset(
    data: &LabeledDataset,
    specs: &[CorruptionSpec],
    out: &Path,
    format: OutputFormat,
) -> Result<Manifest> {
    fs::create_dir_all(out).map_err(|e| Error::storage(out, e))?;
    let mut manifest = Manifest::default();
    for spec in specs {
        check_severity(spec.severity)?;
        let corrupted = corrupt_in_memory(data, spec)?;
        let stem = format!("{}_s{}", spec.kind, spec.severity);
        match format {
            OutputFormat::Binary => {
                let rel = format!("{stem}.bin");
                dataio::write_cifar_binary(&corrupted, &out.join(&rel))?;
                for i in 0..corrupted.len() {
                    manifest.entries.push(ManifestEntry {
                        path: rel.clone(),
                        kind: Some(spec.kind),
                        severity: spec.severity,
                        image_index: i,
                    });
                }
            }
            OutputFormat::Ppm => {
                let dir = out.join(&stem);
                fs::create_dir_all(&dir).map_err(|e| Error::storage(&dir, e))?;
                for (i, img) in corrupted.images.iter().enumerate() {
                    let rel = format!("{stem}/{i:06}.ppm");
                    ppm::write_ppm(img, &out.join(&rel))?;
                    manifest.entries.push(ManifestEntry {
                        path: rel,
                        kind: Some(spec.kind),
                        severity: spec.severity,
                        image_index: i,
                    });
                }
            }
        }
    }
    manifest.write(&out.join(dataio::MANIFEST_FILE))?;
    Ok(manifest)
}
