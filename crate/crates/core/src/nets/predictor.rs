use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::kernels::{softmax, softmax_backward};
use super::network::{ArchSpec, Head, Network};
use super::optim::{accumulate, Optimizer, TrainConfig};
use super::TrainReport;
use crate::dataio::LabeledDataset;
use crate::error::{Error, Result};
use crate::imgcore::{resample, Image, TransformSpace};
use crate::labelgen::LabelStore;
use crate::ranking::{exact_spearman, nan_mean, RankingObjectiveConfig};
use crate::seed;

const KIND: &str = "predictor";

/// Loss predictor architecture: a small backbone with a pooled tap after
/// every stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorArch {
    /// Inputs are resized to `in_side × in_side` first.
    pub in_side: usize,
    pub channels: Vec<usize>,
    pub tap_width: usize,
}

impl Default for PredictorArch {
    fn default() -> Self {
        Self {
            in_side: 32,
            channels: vec![8, 16, 32],
            tap_width: 32,
        }
    }
}

impl PredictorArch {
    pub fn spec(&self, in_channels: usize, outputs: usize) -> ArchSpec {
        ArchSpec {
            in_channels,
            in_side: self.in_side,
            stages: self.channels.clone(),
            head: Head::MultiTap {
                width: self.tap_width,
                outputs,
            },
        }
    }
}

/// Maps an untransformed input to one score per transform of a space; lower
/// means lower expected loss.
#[derive(Clone, Debug)]
pub struct LossPredictor {
    net: Network<f32>,
    space_fingerprint: String,
    seed: u64,
    metrics: BTreeMap<String, f64>,
}

impl LossPredictor {
    pub fn new(
        arch: &PredictorArch,
        in_channels: usize,
        space: &TransformSpace,
        seed_value: u64,
    ) -> Result<Self> {
        let net = Network::init(
            arch.spec(in_channels, space.len()),
            &mut seed::rng_for(&[seed_value, 0x1055]),
        )?;
        Ok(Self {
            net,
            space_fingerprint: space.fingerprint(),
            seed: seed_value,
            metrics: BTreeMap::new(),
        })
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }

    pub fn output_len(&self) -> usize {
        self.net.arch().outputs()
    }

    pub fn space_fingerprint(&self) -> &str {
        &self.space_fingerprint
    }

    pub fn macs(&self) -> u64 {
        self.net.arch().macs()
    }

    pub fn metrics(&self) -> &BTreeMap<String, f64> {
        &self.metrics
    }

    pub fn set_metric(&mut self, key: &str, value: f64) {
        self.metrics.insert(key.to_string(), value);
    }

    /// Fails unless this predictor was built for `space`.
    pub fn check_space(&self, space: &TransformSpace) -> Result<()> {
        if self.space_fingerprint != space.fingerprint() || self.output_len() != space.len() {
            return Err(Error::Consistency(format!(
                "predictor has {} outputs for space {}, got space {} with {} transforms",
                self.output_len(),
                &self.space_fingerprint[..12.min(self.space_fingerprint.len())],
                &space.fingerprint()[..12],
                space.len()
            )));
        }
        Ok(())
    }

    fn input(&self, img: &Image) -> Result<Vec<f32>> {
        let a = self.net.arch();
        if img.channels() != a.in_channels {
            return Err(Error::dim(format!(
                "image has {} channels, predictor expects {}",
                img.channels(),
                a.in_channels
            )));
        }
        if img.height() == a.in_side && img.width() == a.in_side {
            Ok(img.to_planar())
        } else {
            Ok(resample::resize(img, a.in_side, a.in_side).to_planar())
        }
    }

    /// Raw scores, one per transform. Deterministic.
    pub fn scores(&self, img: &Image) -> Result<Vec<f64>> {
        let out = self.net.forward(&self.input(img)?)?;
        let scores: Vec<f64> = out.iter().map(|&v| f64::from(v)).collect();
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric(
                "predictor produced a non-finite score".into(),
            ));
        }
        Ok(scores)
    }

    pub fn fingerprint(&self) -> String {
        super::target::fingerprint(&self.net)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            descriptor: format!(
                "kind={KIND};space={};{}",
                self.space_fingerprint,
                self.net.arch()
            ),
            seed: self.seed,
            metrics: self.metrics.clone(),
            params: self.net.params().to_vec(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let rest = ck
            .descriptor
            .strip_prefix(&format!("kind={KIND};space="))
            .ok_or_else(|| {
                Error::Format(format!(
                    "checkpoint `{}` is not a loss predictor",
                    ck.descriptor
                ))
            })?;
        let space_fingerprint = rest.split(';').next().unwrap_or_default().to_string();
        let arch = ArchSpec::parse(&ck.descriptor)?;
        if !matches!(arch.head, Head::MultiTap { .. }) {
            return Err(Error::Format(
                "loss predictor checkpoint without a tap head".into(),
            ));
        }
        let net = Network::from_params(arch, ck.params)?;
        Ok(Self {
            net,
            space_fingerprint,
            seed: ck.seed,
            metrics: ck.metrics,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// Fills a random square (side up to `max_frac` of the image side) with 0.5
/// on a planar buffer.
fn cutout(planar: &mut [f32], c: usize, side: usize, max_frac: f64, rng: &mut impl Rng) {
    let max_len = (max_frac * side as f64).floor() as usize;
    if max_len == 0 {
        return;
    }
    let len = rng.random_range(0..=max_len);
    if len == 0 {
        return;
    }
    let y0 = rng.random_range(0..=side - len);
    let x0 = rng.random_range(0..=side - len);
    for ch in 0..c {
        for y in y0..y0 + len {
            let row = ch * side * side + y * side;
            planar[row + x0..row + x0 + len].fill(0.5);
        }
    }
}

/// One training sample: an image position, the store record giving its
/// state and target, and which copy of the image within the batch it is.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSlot {
    pub image: usize,
    pub record: usize,
    pub copy: usize,
}

fn unique_per_batch(cfg: &TrainConfig) -> usize {
    (cfg.batch_size / cfg.batch_repeat).max(1)
}

/// Batches of one epoch. `states[i]` lists the store records (labelled
/// states) of image `i`. Each batch holds `batch_size / batch_repeat`
/// distinct images, each repeated `batch_repeat` times; the copies of an
/// image use distinct states while it has enough of them.
pub fn batch_plan(states: &[Vec<usize>], cfg: &TrainConfig, epoch: u64) -> Vec<Vec<BatchSlot>> {
    let mut order: Vec<usize> = (0..states.len()).collect();
    order.shuffle(&mut seed::rng_for(&[cfg.seed, 11, epoch]));
    order
        .chunks(unique_per_batch(cfg))
        .map(|images| {
            let mut batch = Vec::with_capacity(images.len() * cfg.batch_repeat);
            for &image in images {
                let mut pick = states[image].clone();
                pick.shuffle(&mut seed::rng_for(&[cfg.seed, 12, epoch, image as u64]));
                for copy in 0..cfg.batch_repeat {
                    batch.push(BatchSlot {
                        image,
                        record: pick[copy % pick.len()],
                        copy,
                    });
                }
            }
            batch
        })
        .collect()
}

struct Job {
    record: usize,
    stream: [u64; 3],
}

/// Trains a loss predictor on precomputed relative losses.
///
/// Each batch holds `batch_size / batch_repeat` distinct images, each repeated
/// `batch_repeat` times with a different labelled state (clean or corrupted)
/// and its own cutout. Scores are softmax-normalized before the ranking
/// objective. Samples whose ground truth is constant, or whose taps were all
/// dropped, are skipped; a batch with no usable sample is skipped with a
/// warning. Gradient clipping guards against near-tied predictions, where
/// the rank-correlation gradient grows without bound.
pub fn train_predictor(
    store: &LabelStore,
    data: &LabeledDataset,
    space: &TransformSpace,
    cfg: &TrainConfig,
    objective: &RankingObjectiveConfig,
    arch: &PredictorArch,
) -> Result<(LossPredictor, TrainReport)> {
    cfg.validate()?;
    objective.validate()?;
    store.check_space(space)?;
    if data.is_empty() {
        return Err(Error::param("cannot train on an empty dataset"));
    }
    let (_, _, channels) = data.shape().expect("non-empty dataset");
    let mut model = LossPredictor::new(arch, channels, space, cfg.seed)?;

    // Labelled states per image, in store order.
    let mut states: Vec<Vec<usize>> = Vec::with_capacity(data.len());
    let by_id = store.records_by_id();
    for &id in data.ids() {
        match by_id.get(&id) {
            Some(v) if !v.is_empty() => states.push(v.clone()),
            _ => {
                return Err(Error::Consistency(format!(
                    "label store has no record for image id {id}"
                )))
            }
        }
    }
    let pos = data.position_of();
    let wanted: Vec<usize> = states.iter().flatten().copied().collect();
    let inputs: HashMap<usize, Vec<f32>> = wanted
        .par_iter()
        .map(|&r| {
            let rec = &store.records()[r];
            let img = &data.images()[pos[&rec.id]];
            Ok((r, model.input(&rec.perturbation.apply(img)?)?))
        })
        .collect::<Result<_>>()?;

    let steps_per_epoch = data.len().div_ceil(unique_per_batch(cfg));
    let mut params = model.net.params().to_vec();
    let mut opt = Optimizer::new(cfg, &params, cfg.epochs * steps_per_epoch);
    let mut report = TrainReport::default();
    let side = arch.in_side;

    for epoch in 0..cfg.epochs as u64 {
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0;
        for (step, batch) in batch_plan(&states, cfg, epoch).into_iter().enumerate() {
            let jobs: Vec<Job> = batch
                .into_iter()
                .map(|s| Job {
                    record: s.record,
                    stream: [epoch, s.image as u64, s.copy as u64],
                })
                .collect();
            let scale = 1.0 / jobs.len() as f32;
            let net = &model.net;
            let (loss, count, mut grad) = accumulate(&jobs, params.len(), |job, grad| {
                let truth = &store.records()[job.record].relative_losses;
                let [e, i, copy] = job.stream;
                let mut x = inputs[&job.record].clone();
                cutout(
                    &mut x,
                    channels,
                    side,
                    cfg.cutout_max,
                    &mut seed::rng_for(&[cfg.seed, 13, e, i, copy]),
                );
                let mut drop_rng = seed::rng_for(&[cfg.seed, 14, e, i, copy]);
                let dropout = (cfg.dropout > 0.0).then_some((cfg.dropout, &mut drop_rng));
                let trace = net.forward_train(&x, dropout)?;
                if trace.all_taps_dropped() {
                    return Ok(None);
                }
                let scores: Vec<f64> = trace.output.iter().map(|&v| f64::from(v)).collect();
                let soft = softmax(&scores);
                let (loss, g_soft) = match objective.loss(&soft, truth) {
                    Ok(v) => v,
                    Err(Error::Degenerate(_)) => return Ok(None),
                    Err(e) => return Err(e),
                };
                let g: Vec<f32> = softmax_backward(&soft, &g_soft)
                    .iter()
                    .map(|&v| v as f32 * scale)
                    .collect();
                net.backward(&trace, &g, grad);
                Ok(Some(loss))
            })?;
            if count == 0 {
                log::warn!(
                    "predictor epoch {epoch} step {step}: all samples degenerate, batch skipped"
                );
                report.skipped_batches += 1;
                continue;
            }
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite predictor loss at epoch {epoch}, step {step} (lr {:.3e})",
                    opt.current_lr()
                )));
            }
            if count < jobs.len() {
                let fix = jobs.len() as f32 / count as f32;
                grad.iter_mut().for_each(|g| *g *= fix);
            }
            epoch_loss += loss;
            epoch_count += count;
            opt.step(&mut params, &grad);
            model.net.params_mut().copy_from_slice(&params);
        }
        let mean = if epoch_count > 0 {
            epoch_loss / epoch_count as f64
        } else {
            f64::NAN
        };
        log::info!(
            "predictor epoch {}/{}: ranking loss {mean:.4}",
            epoch + 1,
            cfg.epochs
        );
        report.epoch_losses.push(mean);
    }
    let final_params = opt.finish(params);
    model.net.params_mut().copy_from_slice(&final_params);
    Ok((model, report))
}

/// Mean exact Spearman correlation between predicted scores and stored
/// relative losses over every record of the images in `data`. Records with
/// an undefined correlation are ignored; NaN if none remain.
pub fn mean_spearman(
    predictor: &LossPredictor,
    store: &LabelStore,
    data: &LabeledDataset,
) -> Result<f64> {
    let pos = data.position_of();
    let picked: Vec<_> = store
        .records()
        .iter()
        .filter(|r| pos.contains_key(&r.id))
        .collect();
    let values = picked
        .par_iter()
        .map(|rec| {
            let img = rec.perturbation.apply(&data.images()[pos[&rec.id]])?;
            let scores = predictor.scores(&img)?;
            exact_spearman(&scores, &rec.relative_losses)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(nan_mean(values))
}
