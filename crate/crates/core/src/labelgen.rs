//! Ground-truth relative losses: the frozen target's cross-entropy under
//! every transform of a space, softmax-normalized, stored per image state.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corruptions::{apply_corruption, training_kinds, CorruptionKind, CorruptionSpec};
use crate::dataio::LabeledDataset;
use crate::error::{Error, Result};
use crate::imgcore::{apply_for_model, Image, TransformSpace};
use crate::nets::TargetClassifier;
use crate::seed;

pub const STORE_VERSION: u32 = 1;

/// Records computed between two appends to the store file.
const FLUSH_EVERY: usize = 256;

/// The state of an image a label was computed for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Perturbation {
    Clean,
    Corrupted(CorruptionSpec),
}

impl Perturbation {
    pub fn apply(&self, img: &Image) -> Result<Image> {
        match self {
            Perturbation::Clean => Ok(img.clone()),
            Perturbation::Corrupted(spec) => apply_corruption(img, spec),
        }
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Perturbation::Clean => f.write_str("clean"),
            Perturbation::Corrupted(s) => write!(f, "{}:{}:{}", s.kind, s.severity, s.seed),
        }
    }
}

impl FromStr for Perturbation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "clean" {
            return Ok(Perturbation::Clean);
        }
        let bad = || Error::Format(format!("bad perturbation descriptor `{s}`"));
        let mut parts = s.split(':');
        let (Some(kind), Some(sev), Some(seed), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad());
        };
        let kind: CorruptionKind = kind.parse()?;
        let severity: u8 = sev.parse().map_err(|_| bad())?;
        let seed: u64 = seed.parse().map_err(|_| bad())?;
        Ok(Perturbation::Corrupted(CorruptionSpec::new(
            kind, severity, seed,
        )?))
    }
}

/// Which states of each image get labels: the clean image plus
/// `corrupted_per_image` corrupted versions with uniformly drawn kind and
/// severity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationPlan {
    pub corrupted_per_image: usize,
    pub kinds: Vec<CorruptionKind>,
    pub seed: u64,
}

impl Default for PerturbationPlan {
    fn default() -> Self {
        Self {
            corrupted_per_image: 3,
            kinds: training_kinds(),
            seed: 0,
        }
    }
}

impl PerturbationPlan {
    pub fn clean_only() -> Self {
        Self {
            corrupted_per_image: 0,
            ..Self::default()
        }
    }

    /// States of the image with id `id`, clean first.
    pub fn states(&self, id: u64) -> Vec<Perturbation> {
        let mut out = vec![Perturbation::Clean];
        if self.kinds.is_empty() {
            return out;
        }
        for j in 0..self.corrupted_per_image as u64 {
            let mut rng = seed::rng_for(&[self.seed, 0x5EED, id, j]);
            let kind = self.kinds[rng.random_range(0..self.kinds.len())];
            let severity = rng.random_range(1..=5u8);
            let spec = CorruptionSpec {
                kind,
                severity,
                seed: seed::derive_seed(&[self.seed, id, j]),
            };
            out.push(Perturbation::Corrupted(spec));
        }
        out
    }
}

/// Relative losses of one image state.
#[derive(Clone, Debug, PartialEq)]
pub struct LossLabelRecord {
    pub id: u64,
    pub perturbation: Perturbation,
    pub raw_losses: Vec<f64>,
    pub relative_losses: Vec<f64>,
}

impl LossLabelRecord {
    /// Builds a record from raw losses; values are rounded to the stored
    /// precision so in-memory and reloaded stores compare equal.
    pub fn from_raw(id: u64, perturbation: Perturbation, raw: &[f64]) -> Result<Self> {
        let raw_losses: Vec<f64> = raw.iter().map(|&v| round9(v)).collect();
        let relative_losses = normalize_relative(&raw_losses)?
            .into_iter()
            .map(round9)
            .collect();
        let rec = Self {
            id,
            perturbation,
            raw_losses,
            relative_losses,
        };
        rec.validate()?;
        Ok(rec)
    }

    fn validate(&self) -> Result<()> {
        if self.raw_losses.len() != self.relative_losses.len() || self.raw_losses.is_empty() {
            return Err(Error::Consistency(format!(
                "record {} has mismatched loss vectors",
                self.id
            )));
        }
        if self.raw_losses.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Numeric(format!(
                "record {} has an invalid raw loss",
                self.id
            )));
        }
        let sum: f64 = self.relative_losses.iter().sum();
        if (sum - 1.0).abs() > 1e-6
            || self
                .relative_losses
                .iter()
                .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::Numeric(format!(
                "record {} relative losses are not a distribution",
                self.id
            )));
        }
        Ok(())
    }

    fn to_line(&self) -> String {
        let mut line = format!("{}\t{}", self.id, self.perturbation);
        for v in self.raw_losses.iter().chain(&self.relative_losses) {
            line.push('\t');
            line.push_str(&fmt9(*v));
        }
        line
    }

    fn parse_line(line: &str, transforms: usize) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 + 2 * transforms {
            return Err(Error::Format(format!(
                "label record has {} fields, expected {}",
                fields.len(),
                2 + 2 * transforms
            )));
        }
        let id = fields[0]
            .parse()
            .map_err(|_| Error::Format(format!("bad record id `{}`", fields[0])))?;
        let perturbation = fields[1].parse()?;
        let nums = fields[2..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad loss value `{f}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let rec = Self {
            id,
            perturbation,
            raw_losses: nums[..transforms].to_vec(),
            relative_losses: nums[transforms..].to_vec(),
        };
        rec.validate()?;
        Ok(rec)
    }
}

fn fmt9(v: f64) -> String {
    format!("{v:.8e}")
}

fn round9(v: f64) -> f64 {
    fmt9(v).parse().expect("formatted float parses")
}

/// Ties a store to the transform space and target that produced it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub version: u32,
    pub space_fingerprint: String,
    pub target_fingerprint: String,
    pub transforms: usize,
}

/// Append-only collection of records keyed by `(id, perturbation)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelStore {
    header: StoreHeader,
    records: Vec<LossLabelRecord>,
    keys: HashSet<(u64, Perturbation)>,
}

impl LabelStore {
    pub fn new(header: StoreHeader) -> Self {
        Self {
            header,
            records: Vec::new(),
            keys: HashSet::new(),
        }
    }

    pub fn header(&self) -> &StoreHeader {
        &self.header
    }

    pub fn records(&self) -> &[LossLabelRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, id: u64, perturbation: &Perturbation) -> bool {
        self.keys.contains(&(id, *perturbation))
    }

    pub fn push(&mut self, rec: LossLabelRecord) -> Result<()> {
        if rec.raw_losses.len() != self.header.transforms {
            return Err(Error::Consistency(format!(
                "record has {} losses, store expects {}",
                rec.raw_losses.len(),
                self.header.transforms
            )));
        }
        if !self.keys.insert((rec.id, rec.perturbation)) {
            return Err(Error::Consistency(format!(
                "duplicate label record ({}, {})",
                rec.id, rec.perturbation
            )));
        }
        self.records.push(rec);
        Ok(())
    }

    /// Record indices grouped by image id, in store order.
    pub fn records_by_id(&self) -> HashMap<u64, Vec<usize>> {
        let mut map: HashMap<u64, Vec<usize>> = HashMap::new();
        for (i, r) in self.records.iter().enumerate() {
            map.entry(r.id).or_default().push(i);
        }
        map
    }

    pub fn check_space(&self, space: &TransformSpace) -> Result<()> {
        if self.header.space_fingerprint != space.fingerprint()
            || self.header.transforms != space.len()
        {
            return Err(Error::Consistency(
                "label store was built for a different transform space".into(),
            ));
        }
        Ok(())
    }

    fn header_line(&self) -> String {
        serde_json::to_string(&self.header).expect("header serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = self.header_line();
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }

    /// The store with records sorted by `(id, descriptor)`; independent of
    /// the order records were produced in.
    pub fn canonical_text(&self) -> String {
        let mut lines: Vec<(u64, String, String)> = self
            .records
            .iter()
            .map(|r| (r.id, r.perturbation.to_string(), r.to_line()))
            .collect();
        lines.sort();
        let mut out = self.header_line();
        out.push('\n');
        for (_, _, l) in lines {
            out.push_str(&l);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, head) = lines
            .next()
            .ok_or_else(|| Error::Format("empty label store".into()))?;
        let header: StoreHeader = serde_json::from_str(head)
            .map_err(|e| Error::Format(format!("label store header: {e}")))?;
        if header.version != STORE_VERSION {
            return Err(Error::Format(format!(
                "label store version {} unsupported",
                header.version
            )));
        }
        let mut store = Self::new(header);
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let rec = LossLabelRecord::parse_line(line, store.header.transforms)
                .map_err(|e| Error::Format(format!("label store line {}: {e}", n + 1)))?;
            store.push(rec)?;
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::storage(path, e))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::storage(path, e))
    }
}

/// Softmax of raw losses with max subtraction.
pub fn normalize_relative(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN in raw losses".into()));
    }
    if raw.iter().any(|v| v.is_infinite()) {
        return Err(Error::Numeric("infinite raw loss".into()));
    }
    Ok(crate::nets::kernels::softmax(raw))
}

fn require_frozen(target: &TargetClassifier) -> Result<()> {
    if target.is_frozen() {
        Ok(())
    } else {
        Err(Error::Consistency(
            "target classifier must be frozen before computing losses".into(),
        ))
    }
}

/// Cross-entropy of the frozen target on each transformed version of `img`,
/// in space order.
pub fn compute_transform_losses(
    target: &TargetClassifier,
    img: &Image,
    label: usize,
    space: &TransformSpace,
) -> Result<Vec<f64>> {
    require_frozen(target)?;
    if label >= target.class_count() {
        return Err(Error::param(format!(
            "label {label} out of range for {} classes",
            target.class_count()
        )));
    }
    space
        .transforms()
        .iter()
        .map(|t| {
            let lp = target.log_probs(&apply_for_model(img, t)?)?;
            Ok((-lp[label]).max(0.0))
        })
        .collect()
}

/// Computes labels for every planned state of every image and appends them
/// to `out`. Existing records are kept and skipped, so an interrupted run
/// can be resumed. Output is independent of `workers`.
pub fn generate_label_store(
    target: &TargetClassifier,
    data: &LabeledDataset,
    space: &TransformSpace,
    plan: &PerturbationPlan,
    out: &Path,
    workers: usize,
) -> Result<LabelStore> {
    require_frozen(target)?;
    let header = StoreHeader {
        version: STORE_VERSION,
        space_fingerprint: space.fingerprint(),
        target_fingerprint: target.fingerprint(),
        transforms: space.len(),
    };
    let mut store = if out.exists() {
        let mut text = fs::read_to_string(out).map_err(|e| Error::storage(out, e))?;
        if !text.ends_with('\n') {
            // drop a partially written trailing record
            text.truncate(text.rfind('\n').map_or(0, |i| i + 1));
        }
        let store = if text.is_empty() {
            LabelStore::new(header.clone())
        } else {
            LabelStore::parse(&text)?
        };
        if store.header != header {
            return Err(Error::Consistency(format!(
                "label store {} was produced by a different target or transform space",
                out.display()
            )));
        }
        fs::write(out, store.to_text()).map_err(|e| Error::storage(out, e))?;
        store
    } else {
        let store = LabelStore::new(header);
        fs::write(out, store.to_text()).map_err(|e| Error::storage(out, e))?;
        store
    };

    let todo: Vec<(usize, Perturbation)> = data
        .ids()
        .iter()
        .enumerate()
        .flat_map(|(i, &id)| plan.states(id).into_iter().map(move |p| (i, p)))
        .filter(|(i, p)| !store.contains(data.ids()[*i], p))
        .collect();
    if todo.is_empty() {
        return Ok(store);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut file = fs::OpenOptions::new()
        .append(true)
        .open(out)
        .map_err(|e| Error::storage(out, e))?;
    for block in todo.chunks(FLUSH_EVERY) {
        let recs = pool.install(|| {
            block
                .par_iter()
                .map(|&(i, p)| {
                    let img = p.apply(&data.images()[i])?;
                    let raw = compute_transform_losses(target, &img, data.labels()[i], space)?;
                    LossLabelRecord::from_raw(data.ids()[i], p, &raw)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let mut text = String::new();
        for r in &recs {
            text.push_str(&r.to_line());
            text.push('\n');
        }
        file.write_all(text.as_bytes())
            .map_err(|e| Error::storage(out, e))?;
        file.flush().map_err(|e| Error::storage(out, e))?;
        for r in recs {
            store.push(r)?;
        }
        log::debug!("label store: {} records", store.len());
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        let u = normalize_relative(&[2.0; 4]).unwrap();
        assert!(u.iter().all(|&v| (v - 0.25).abs() < 1e-12));
        let r = normalize_relative(&[0.0, 3f64.ln()]).unwrap();
        assert!((r[0] - 0.25).abs() < 1e-6 && (r[1] - 0.75).abs() < 1e-6);
        assert!(matches!(
            normalize_relative(&[0.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn perturbation_descriptor_round_trip() {
        let plan = PerturbationPlan {
            seed: 9,
            ..PerturbationPlan::default()
        };
        let states = plan.states(42);
        assert_eq!(states.len(), 4);
        assert_eq!(states[0], Perturbation::Clean);
        for s in states {
            assert_eq!(s.to_string().parse::<Perturbation>().unwrap(), s);
        }
        assert_eq!(plan.states(42), plan.states(42));
        assert!("noise:3:1".parse::<Perturbation>().is_err());
        assert!("gaussian_noise:7:1".parse::<Perturbation>().is_err());
    }

    #[test]
    fn store_text_round_trip_and_duplicates() {
        let header = StoreHeader {
            version: STORE_VERSION,
            space_fingerprint: "s".into(),
            target_fingerprint: "t".into(),
            transforms: 3,
        };
        let mut store = LabelStore::new(header);
        store
            .push(LossLabelRecord::from_raw(5, Perturbation::Clean, &[0.1, 2.0, 0.7]).unwrap())
            .unwrap();
        store
            .push(LossLabelRecord::from_raw(1, Perturbation::Clean, &[1.0, 1.0, 1.0]).unwrap())
            .unwrap();
        let dup = LossLabelRecord::from_raw(5, Perturbation::Clean, &[0.0, 0.0, 0.0]).unwrap();
        assert!(store.push(dup).is_err());
        let back = LabelStore::parse(&store.to_text()).unwrap();
        assert_eq!(back, store);
        assert!(store
            .canonical_text()
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("1\t"));
    }
}
