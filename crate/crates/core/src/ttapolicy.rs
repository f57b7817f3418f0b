//! Test-time augmentation policies: fixed ensembles, per-instance top-k
//! selection from predicted losses, and random and oracle selectors.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{apply_for_model, hflip, Image, Transform, TransformKind, TransformSpace};
use crate::nets::kernels::{log_softmax, softmax};
use crate::nets::{argmax, LossPredictor, TargetClassifier};
use crate::seed;

/// How a prediction is assembled from target forward passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SelectionPolicy {
    Identity,
    HFlipEnsemble,
    FiveCrop,
    TenCrop,
    RandomK { k: usize, seed: u64 },
    OursK { k: usize, compose_flip: bool },
    OracleK { k: usize },
}

impl SelectionPolicy {
    pub fn k(&self) -> Option<usize> {
        match *self {
            SelectionPolicy::RandomK { k, .. }
            | SelectionPolicy::OursK { k, .. }
            | SelectionPolicy::OracleK { k } => Some(k),
            _ => None,
        }
    }

    /// Whether the policy picks transforms from the space per image.
    pub fn is_selector(&self) -> bool {
        self.k().is_some()
    }

    pub fn uses_predictor(&self) -> bool {
        matches!(self, SelectionPolicy::OursK { .. })
    }

    pub fn needs_label(&self) -> bool {
        matches!(self, SelectionPolicy::OracleK { .. })
    }

    /// Target forward passes per image. Oracle selection is hypothetical and
    /// its loss evaluations are not counted.
    pub fn inference_count(&self) -> usize {
        match *self {
            SelectionPolicy::Identity => 1,
            SelectionPolicy::HFlipEnsemble => 2,
            SelectionPolicy::FiveCrop => 5,
            SelectionPolicy::TenCrop => 10,
            SelectionPolicy::RandomK { k, .. } | SelectionPolicy::OracleK { k } => k,
            SelectionPolicy::OursK { k, compose_flip } => {
                if compose_flip {
                    2 * k
                } else {
                    k
                }
            }
        }
    }

    pub fn validate(&self, space_len: usize) -> Result<()> {
        match self.k() {
            Some(k) if k == 0 || k > space_len => Err(Error::param(format!(
                "{self}: k must be in 1..={space_len}"
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for SelectionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            SelectionPolicy::Identity => f.write_str("identity"),
            SelectionPolicy::HFlipEnsemble => f.write_str("hflip"),
            SelectionPolicy::FiveCrop => f.write_str("five_crop"),
            SelectionPolicy::TenCrop => f.write_str("ten_crop"),
            SelectionPolicy::RandomK { k, seed: 0 } => write!(f, "random:{k}"),
            SelectionPolicy::RandomK { k, seed } => write!(f, "random:{k}:{seed}"),
            SelectionPolicy::OursK {
                k,
                compose_flip: false,
            } => write!(f, "ours:{k}"),
            SelectionPolicy::OursK {
                k,
                compose_flip: true,
            } => write!(f, "ours:{k}+flip"),
            SelectionPolicy::OracleK { k } => write!(f, "oracle:{k}"),
        }
    }
}

impl FromStr for SelectionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::param(format!("unknown policy `{s}`"));
        let num = |v: &str| v.parse::<usize>().map_err(|_| bad());
        let mut parts = s.split(':');
        let name = parts.next().unwrap_or_default();
        let rest: Vec<&str> = parts.collect();
        let policy = match (name, rest.as_slice()) {
            ("identity", []) => SelectionPolicy::Identity,
            ("hflip", []) => SelectionPolicy::HFlipEnsemble,
            ("five_crop", []) => SelectionPolicy::FiveCrop,
            ("ten_crop", []) => SelectionPolicy::TenCrop,
            ("random", [k]) => SelectionPolicy::RandomK {
                k: num(k)?,
                seed: 0,
            },
            ("random", [k, seed]) => SelectionPolicy::RandomK {
                k: num(k)?,
                seed: seed.parse().map_err(|_| bad())?,
            },
            ("ours", [k]) => match k.strip_suffix("+flip") {
                Some(k) => SelectionPolicy::OursK {
                    k: num(k)?,
                    compose_flip: true,
                },
                None => SelectionPolicy::OursK {
                    k: num(k)?,
                    compose_flip: false,
                },
            },
            ("oracle", [k]) => SelectionPolicy::OracleK { k: num(k)? },
            _ => return Err(bad()),
        };
        if policy.k() == Some(0) {
            return Err(Error::param(format!("{s}: k must be at least 1")));
        }
        Ok(policy)
    }
}

impl TryFrom<String> for SelectionPolicy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SelectionPolicy> for String {
    fn from(p: SelectionPolicy) -> String {
        p.to_string()
    }
}

/// Averaged class probabilities of a policy on one image.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePrediction {
    pub probabilities: Vec<f64>,
    /// Space indices for selector policies; view indices otherwise.
    pub chosen: Vec<usize>,
    pub inference_count: usize,
}

impl EnsemblePrediction {
    pub fn predicted_class(&self) -> usize {
        argmax(&self.probabilities)
    }
}

/// One input presented to the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum View {
    /// The untransformed image, optionally flipped.
    Plain { flip: bool },
    /// A transform of the space, optionally followed by a flip.
    Space { index: usize, flip: bool },
    /// One of the five 0.875 crops (resized back), optionally flipped.
    Crop { position: u8, flip: bool },
}

/// Memoizes target logits and predictor scores for one image, so several
/// policies can share forward passes.
pub struct ViewCache<'a> {
    target: &'a TargetClassifier,
    space: &'a TransformSpace,
    img: &'a Image,
    logits: HashMap<View, Vec<f64>>,
    scores: Option<Vec<f64>>,
}

impl<'a> ViewCache<'a> {
    pub fn new(target: &'a TargetClassifier, space: &'a TransformSpace, img: &'a Image) -> Self {
        Self {
            target,
            space,
            img,
            logits: HashMap::new(),
            scores: None,
        }
    }

    /// Number of distinct target forward passes run so far.
    pub fn forward_passes(&self) -> usize {
        self.logits.len()
    }

    fn canonical(&self, view: View) -> View {
        match view {
            View::Space { index, flip }
                if self.space.transforms()[index].kind == TransformKind::Identity =>
            {
                View::Plain { flip }
            }
            v => v,
        }
    }

    fn render(&self, view: View) -> Result<Image> {
        let (img, flip) = match view {
            View::Plain { flip } => (self.img.clone(), flip),
            View::Space { index, flip } => (
                apply_for_model(self.img, &self.space.transforms()[index])?,
                flip,
            ),
            View::Crop { position, flip } => {
                (apply_for_model(self.img, &Transform::crop(position))?, flip)
            }
        };
        Ok(if flip { hflip(&img) } else { img })
    }

    pub fn logits(&mut self, view: View) -> Result<&[f64]> {
        let view = self.canonical(view);
        if !self.logits.contains_key(&view) {
            let l = self.target.logits_f64(&self.render(view)?)?;
            self.logits.insert(view, l);
        }
        Ok(&self.logits[&view])
    }

    pub fn probs(&mut self, view: View) -> Result<Vec<f64>> {
        Ok(softmax(self.logits(view)?))
    }

    /// Cross-entropy of the target on each transform of the space.
    pub fn losses(&mut self, label: usize) -> Result<Vec<f64>> {
        if label >= self.target.class_count() {
            return Err(Error::param(format!(
                "label {label} out of range for {} classes",
                self.target.class_count()
            )));
        }
        (0..self.space.len())
            .map(|index| {
                Ok(
                    (-log_softmax(self.logits(View::Space { index, flip: false })?)[label])
                        .max(0.0),
                )
            })
            .collect()
    }

    pub fn scores(&mut self, predictor: &LossPredictor) -> Result<Vec<f64>> {
        if self.scores.is_none() {
            self.scores = Some(predictor.scores(self.img)?);
        }
        Ok(self.scores.clone().expect("just filled"))
    }

    fn mean_of(&mut self, views: &[View]) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.target.class_count()];
        for &v in views {
            for (a, p) in acc.iter_mut().zip(self.probs(v)?) {
                *a += p;
            }
        }
        let n = views.len() as f64;
        Ok(acc.into_iter().map(|a| a / n).collect())
    }
}

/// Indices of the `k` smallest scores, ordered by `(score, index)`.
pub fn select_topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::param(format!("k = {k} not in 1..={}", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// `k` distinct indices drawn uniformly from `0..space_len`.
pub fn random_select(space_len: usize, k: usize, seed_value: u64) -> Result<Vec<usize>> {
    if k == 0 || k > space_len {
        return Err(Error::param(format!("k = {k} not in 1..={space_len}")));
    }
    let mut rng = seed::rng_for(&[seed_value, 0xA11D]);
    Ok(rand::seq::index::sample(&mut rng, space_len, k).into_vec())
}

/// Mean of the target's probabilities over each transformed input.
pub fn predict_fixed_ensemble(
    target: &TargetClassifier,
    img: &Image,
    transforms: &[Transform],
) -> Result<EnsemblePrediction> {
    if transforms.is_empty() {
        return Err(Error::param("empty transform list"));
    }
    let mut acc = vec![0.0; target.class_count()];
    for t in transforms {
        for (a, p) in acc
            .iter_mut()
            .zip(target.probs_f64(&apply_for_model(img, t)?)?)
        {
            *a += p;
        }
    }
    let n = transforms.len() as f64;
    Ok(EnsemblePrediction {
        probabilities: acc.into_iter().map(|a| a / n).collect(),
        chosen: (0..transforms.len()).collect(),
        inference_count: transforms.len(),
    })
}

/// Averages the target over the `k` transforms with the lowest predicted
/// loss (each also flipped when `compose_flip`).
pub fn predict_instance_aware(
    target: &TargetClassifier,
    predictor: &LossPredictor,
    img: &Image,
    space: &TransformSpace,
    k: usize,
    compose_flip: bool,
) -> Result<EnsemblePrediction> {
    let policy = SelectionPolicy::OursK { k, compose_flip };
    predict_cached(
        &policy,
        &mut ViewCache::new(target, space, img),
        Some(predictor),
        None,
        0,
    )
}

/// The `k` transforms with the lowest true loss for `label`.
pub fn oracle_select(
    target: &TargetClassifier,
    img: &Image,
    label: usize,
    space: &TransformSpace,
    k: usize,
) -> Result<Vec<usize>> {
    let losses = crate::labelgen::compute_transform_losses(target, img, label, space)?;
    select_topk(&losses, k)
}

/// Runs `policy` on one image. `label` is required by the oracle;
/// `image_key` seeds the random selector.
pub fn predict(
    policy: &SelectionPolicy,
    target: &TargetClassifier,
    predictor: Option<&LossPredictor>,
    img: &Image,
    label: Option<usize>,
    space: &TransformSpace,
    image_key: u64,
) -> Result<EnsemblePrediction> {
    predict_cached(
        policy,
        &mut ViewCache::new(target, space, img),
        predictor,
        label,
        image_key,
    )
}

/// [`predict`] through a shared per-image cache.
pub fn predict_cached(
    policy: &SelectionPolicy,
    cache: &mut ViewCache<'_>,
    predictor: Option<&LossPredictor>,
    label: Option<usize>,
    image_key: u64,
) -> Result<EnsemblePrediction> {
    let space_len = cache.space.len();
    policy.validate(space_len)?;
    let plain = |flip| View::Plain { flip };
    let crops = |flip: bool| (0..5u8).map(move |position| View::Crop { position, flip });
    let (views, chosen): (Vec<View>, Vec<usize>) = match *policy {
        SelectionPolicy::Identity => (vec![plain(false)], vec![cache.space.identity_index()]),
        SelectionPolicy::HFlipEnsemble => (vec![plain(false), plain(true)], vec![0, 1]),
        SelectionPolicy::FiveCrop => (crops(false).collect(), (0..5).collect()),
        SelectionPolicy::TenCrop => (crops(false).chain(crops(true)).collect(), (0..10).collect()),
        SelectionPolicy::RandomK { k, seed } => {
            let chosen = random_select(space_len, k, seed::derive_seed(&[seed, image_key]))?;
            (
                chosen
                    .iter()
                    .map(|&index| View::Space { index, flip: false })
                    .collect(),
                chosen,
            )
        }
        SelectionPolicy::OracleK { k } => {
            let label =
                label.ok_or_else(|| Error::Config("oracle policy needs the true label".into()))?;
            let chosen = select_topk(&cache.losses(label)?, k)?;
            (
                chosen
                    .iter()
                    .map(|&index| View::Space { index, flip: false })
                    .collect(),
                chosen,
            )
        }
        SelectionPolicy::OursK { k, compose_flip } => {
            let predictor = predictor
                .ok_or_else(|| Error::Config(format!("policy {policy} needs a loss predictor")))?;
            predictor.check_space(cache.space)?;
            let chosen = select_topk(&cache.scores(predictor)?, k)?;
            let mut views = Vec::with_capacity(2 * k);
            for &index in &chosen {
                views.push(View::Space { index, flip: false });
                if compose_flip {
                    views.push(View::Space { index, flip: true });
                }
            }
            (views, chosen)
        }
    };
    Ok(EnsemblePrediction {
        probabilities: cache.mean_of(&views)?,
        chosen,
        inference_count: views.len(),
    })
}
