//! Labeled datasets: CIFAR-style binary I/O, procedural synthetic data, the
//! stratified loss-train / loss-valid split, and directory manifests.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corruptions::CorruptionKind;
use crate::error::{Error, Result};
use crate::imgcore::{ppm, Image};
use crate::seed;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub(crate) images: Vec<Image>,
    pub(crate) labels: Vec<usize>,
    pub(crate) class_count: usize,
    pub(crate) ids: Vec<u64>,
}

impl LabeledDataset {
    pub fn new(
        images: Vec<Image>,
        labels: Vec<usize>,
        class_count: usize,
        ids: Vec<u64>,
    ) -> Result<Self> {
        if images.len() != labels.len() || images.len() != ids.len() {
            return Err(Error::dim(format!(
                "{} images, {} labels, {} ids",
                images.len(),
                labels.len(),
                ids.len()
            )));
        }
        if class_count == 0 {
            return Err(Error::param("class_count must be positive"));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::param(format!(
                "label {l} >= class_count {class_count}"
            )));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|im| !im.same_shape(first)) {
                return Err(Error::dim("images differ in shape"));
            }
        }
        let mut seen = std::collections::HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::Consistency(format!("duplicate image id {dup}")));
        }
        Ok(Self {
            images,
            labels,
            class_count,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// `(height, width, channels)` of the images, if any.
    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        self.images
            .first()
            .map(|im| (im.height(), im.width(), im.channels()))
    }

    /// Sub-dataset of the given positions, in the given order.
    pub fn subset(&self, positions: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: positions.iter().map(|&i| self.images[i].clone()).collect(),
            labels: positions.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            ids: positions.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// First `n` images (or all of them).
    pub fn head(&self, n: usize) -> LabeledDataset {
        let n = n.min(self.len());
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    pub fn position_of(&self) -> HashMap<u64, usize> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect()
    }
}

/// Parses CIFAR-style records: one label byte followed by 3072 channel-planar
/// (R, G, B planes, each row-major) pixel bytes. Image ids are record indices.
pub fn parse_cifar_binary(bytes: &[u8], class_count: usize) -> Result<LabeledDataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "length {} is not a multiple of the {CIFAR_RECORD}-byte record",
            bytes.len()
        )));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut labels = Vec::with_capacity(images.capacity());
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = usize::from(rec[0]);
        if label >= class_count {
            return Err(Error::Format(format!(
                "record {r}: label {label} >= class_count {class_count}"
            )));
        }
        let px = &rec[1..];
        let mut data = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                data.push(f32::from(px[c * plane + i]) / 255.0);
            }
        }
        images.push(Image::new(CIFAR_SIDE, CIFAR_SIDE, 3, data)?);
        labels.push(label);
    }
    let ids = (0..images.len() as u64).collect();
    LabeledDataset::new(images, labels, class_count, ids)
}

pub fn load_cifar_binary(path: &Path, class_count: usize) -> Result<LabeledDataset> {
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    parse_cifar_binary(&bytes, class_count)
}

pub fn encode_cifar_binary(data: &LabeledDataset) -> Result<Vec<u8>> {
    if let Some(shape) = data.shape() {
        if shape != (CIFAR_SIDE, CIFAR_SIDE, 3) {
            return Err(Error::dim(format!(
                "binary format needs 32x32x3 images, got {shape:?}"
            )));
        }
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD);
    for (img, &label) in data.images.iter().zip(&data.labels) {
        let label = u8::try_from(label)
            .map_err(|_| Error::Format(format!("label {label} exceeds a byte")))?;
        out.push(label);
        for c in 0..3 {
            for i in 0..plane {
                out.push(ppm::quantize(img.data()[i * 3 + c]));
            }
        }
    }
    Ok(out)
}

pub fn write_cifar_binary(data: &LabeledDataset, path: &Path) -> Result<()> {
    let bytes = encode_cifar_binary(data)?;
    fs::write(path, bytes).map_err(|e| Error::storage(path, e))
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

const SHAPES: usize = 5;

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Membership test in shape-local coordinates scaled so the shape's outer
/// radius is 1.
fn inside(shape: usize, u: f32, v: f32) -> bool {
    match shape {
        0 => u * u + v * v <= 1.0,
        1 => u.abs() <= 0.8 && v.abs() <= 0.8,
        2 => [270f32, 30.0, 150.0].iter().all(|a| {
            let (s, c) = a.to_radians().sin_cos();
            u * c + v * s <= 0.5
        }),
        3 => (u.abs() <= 0.3 && v.abs() <= 0.9) || (v.abs() <= 0.3 && u.abs() <= 0.9),
        _ => {
            let r2 = u * u + v * v;
            (0.36..=1.0).contains(&r2)
        }
    }
}

fn render_synthetic(class: usize, class_count: usize, side: usize, rng: &mut ChaCha8Rng) -> Image {
    let families = class_count.div_ceil(SHAPES).max(1);
    let shape = class % SHAPES;
    let family = class / SHAPES;
    let s = side as f32;

    // Background: low-saturation base colour, smooth gradient, and stripes.
    let bg_hue = rng.random_range(0.0..360.0);
    let bg = hsv_to_rgb(
        bg_hue,
        rng.random_range(0.0..0.3),
        rng.random_range(0.2..0.5),
    );
    let grad = [
        rng.random_range(-0.1..0.1f32),
        rng.random_range(-0.1..0.1f32),
    ];
    let stripe_freq = rng.random_range(0.2..0.9f32);
    let stripe_angle = rng.random_range(0.0..std::f32::consts::PI);
    let stripe_amp = rng.random_range(0.0..0.08f32);
    let (sa, ca) = stripe_angle.sin_cos();

    // Foreground: hue inside the family band, bright and saturated.
    let band = 360.0 / families as f32;
    let hue = family as f32 * band + band * 0.5 + rng.random_range(-0.3..0.3) * band.min(120.0);
    let fg = hsv_to_rgb(hue, rng.random_range(0.6..1.0), rng.random_range(0.65..1.0));
    let cy = s * rng.random_range(0.38..0.62);
    let cx = s * rng.random_range(0.38..0.62);
    let radius = s * rng.random_range(0.22..0.32);
    let (rs, rc) = rng.random_range(0.0..std::f32::consts::TAU).sin_cos();

    let mut data = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            let (fy, fx) = (y as f32, x as f32);
            let texture = stripe_amp * ((fx * ca + fy * sa) * stripe_freq).sin()
                + grad[0] * (fy / s - 0.5)
                + grad[1] * (fx / s - 0.5);
            // 2x2 supersampled coverage for anti-aliased edges
            let mut cover = 0.0f32;
            for (oy, ox) in [(-0.25, -0.25), (-0.25, 0.25), (0.25, -0.25), (0.25, 0.25)] {
                let dy = (fy + oy - cy) / radius;
                let dx = (fx + ox - cx) / radius;
                let (u, v) = (dx * rc + dy * rs, -dx * rs + dy * rc);
                if inside(shape, u, v) {
                    cover += 0.25;
                }
            }
            for c in 0..3 {
                let back = bg[c] + texture;
                data.push((back * (1.0 - cover) + fg[c] * cover).clamp(0.0, 1.0));
            }
        }
    }
    Image::from_parts(side, side, 3, data)
}

/// Procedurally generated, class-balanced dataset of coloured shapes on
/// textured backgrounds. Class `c` is shape `c % 5` (disk, square, triangle,
/// cross, ring) in colour family `c / 5`. Ids are `0..n`.
pub fn gen_synthetic(
    n: usize,
    class_count: usize,
    side: usize,
    seed_value: u64,
) -> Result<LabeledDataset> {
    if n == 0 || class_count == 0 || side == 0 {
        return Err(Error::param("n, class_count and side must be positive"));
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % class_count).collect();
    labels.shuffle(&mut seed::rng_for(&[seed_value, 0x5EED]));
    let images = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            render_synthetic(
                label,
                class_count,
                side,
                &mut seed::rng_for(&[seed_value, i as u64]),
            )
        })
        .collect();
    LabeledDataset::new(images, labels, class_count, (0..n as u64).collect())
}

// ---------------------------------------------------------------------------
// Split
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub loss_train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            loss_train_fraction: 0.9,
            seed: 0,
        }
    }
}

/// Seeded class-stratified partition into `(loss_train, loss_valid)`.
/// Each fold keeps the input's relative order.
pub fn split(data: &LabeledDataset, spec: &SplitSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    let f = spec.loss_train_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(Error::param(format!(
            "loss_train_fraction {f} not in (0, 1)"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in data.labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for (class, mut members) in by_class {
        if members.len() < 2 {
            return Err(Error::Parameter(format!(
                "class {class} has fewer than 2 samples; cannot split"
            )));
        }
        members.shuffle(&mut seed::rng_for(&[spec.seed, class as u64]));
        let n_train = ((members.len() as f64 * f).round() as usize).clamp(1, members.len() - 1);
        train.extend_from_slice(&members[..n_train]);
        valid.extend_from_slice(&members[n_train..]);
    }
    train.sort_unstable();
    valid.sort_unstable();
    Ok((data.subset(&train), data.subset(&valid)))
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

/// One `path<TAB>kind<TAB>severity<TAB>image_index` line. Clean images use
/// kind `clean` and severity 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub kind: Option<CorruptionKind>,
    pub severity: u8,
    pub image_index: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let kind = e.kind.map_or("clean", CorruptionKind::name);
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.path, kind, e.severity, e.image_index
            ));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = |what: &str| Error::Format(format!("manifest line {}: {what}", n + 1));
            if fields.len() != 4 {
                return Err(bad("expected 4 tab-separated fields"));
            }
            let kind = match fields[1] {
                "clean" => None,
                k => Some(
                    k.parse::<CorruptionKind>()
                        .map_err(|_| bad("unknown kind"))?,
                ),
            };
            entries.push(ManifestEntry {
                path: fields[0].to_string(),
                kind,
                severity: fields[2].parse().map_err(|_| bad("bad severity"))?,
                image_index: fields[3].parse().map_err(|_| bad("bad image index"))?,
            });
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::storage(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        Self::parse(&text)
    }
}

/// A dataset corrupted with one `(kind, severity)`, or the clean set.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub kind: Option<CorruptionKind>,
    pub severity: u8,
    pub data: LabeledDataset,
}

/// Loads every `(kind, severity)` group listed in the manifest at
/// `manifest_path`. Labels and ids come from `reference`, indexed by each
/// entry's `image_index`. Groups are returned in order of first appearance.
pub fn load_manifest_sets(
    manifest_path: &Path,
    reference: &LabeledDataset,
) -> Result<Vec<EvalSet>> {
    let manifest = Manifest::read(manifest_path)?;
    let root = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut order: Vec<(Option<CorruptionKind>, u8)> = Vec::new();
    let mut groups: HashMap<(Option<CorruptionKind>, u8), Vec<&ManifestEntry>> = HashMap::new();
    for e in &manifest.entries {
        let key = (e.kind, e.severity);
        if !groups.contains_key(&key) {
            order.push(key);
        }
        groups.entry(key).or_default().push(e);
    }
    let mut binaries: HashMap<String, LabeledDataset> = HashMap::new();
    let mut sets = Vec::with_capacity(order.len());
    for key in order {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut ids = Vec::new();
        for e in &groups[&key] {
            if e.image_index >= reference.len() {
                return Err(Error::Consistency(format!(
                    "manifest index {} beyond reference dataset of {}",
                    e.image_index,
                    reference.len()
                )));
            }
            let img = if e.path.ends_with(".bin") {
                if !binaries.contains_key(&e.path) {
                    let loaded = load_cifar_binary(&root.join(&e.path), reference.class_count)?;
                    binaries.insert(e.path.clone(), loaded);
                }
                let bin = &binaries[&e.path];
                bin.images.get(e.image_index).cloned().ok_or_else(|| {
                    Error::Format(format!("{} has no record {}", e.path, e.image_index))
                })?
            } else {
                ppm::read_ppm(&root.join(&e.path))?
            };
            images.push(img);
            labels.push(reference.labels[e.image_index]);
            ids.push(reference.ids[e.image_index]);
        }
        // groups are usually one file each; don't keep decoded files around
        binaries.clear();
        sets.push(EvalSet {
            kind: key.0,
            severity: key.1,
            data: LabeledDataset::new(images, labels, reference.class_count, ids)?,
        });
    }
    Ok(sets)
}
