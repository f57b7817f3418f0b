use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::kernels::{log_softmax, softmax};
use super::network::{ArchSpec, Head, Network};
use super::optim::{accumulate, Optimizer, TrainConfig};
use super::TrainReport;
use crate::dataio::LabeledDataset;
use crate::error::{Error, Result};
use crate::imgcore::Image;
use crate::seed;

const KIND: &str = "target";

/// Target classifier architecture: one `conv3x3-ReLU-maxpool` block per
/// entry of `channels`, global average pooling, and a linear head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetArch {
    pub in_channels: usize,
    pub in_side: usize,
    pub channels: Vec<usize>,
    pub classes: usize,
}

impl Default for TargetArch {
    fn default() -> Self {
        Self {
            in_channels: 3,
            in_side: 32,
            channels: vec![32, 64, 128],
            classes: 10,
        }
    }
}

impl TargetArch {
    pub fn spec(&self) -> ArchSpec {
        ArchSpec {
            in_channels: self.in_channels,
            in_side: self.in_side,
            stages: self.channels.clone(),
            head: Head::Classifier {
                classes: self.classes,
            },
        }
    }

    pub fn macs(&self) -> u64 {
        self.spec().macs()
    }
}

/// The frozen-able classifier whose predictions are being augmented.
#[derive(Clone, Debug)]
pub struct TargetClassifier {
    net: Network<f32>,
    frozen: bool,
    seed: u64,
    metrics: BTreeMap<String, f64>,
}

impl TargetClassifier {
    pub fn new(arch: &TargetArch, seed_value: u64) -> Result<Self> {
        let net = Network::init(arch.spec(), &mut seed::rng_for(&[seed_value, 0x7A29]))?;
        Ok(Self {
            net,
            frozen: false,
            seed: seed_value,
            metrics: BTreeMap::new(),
        })
    }

    pub fn from_network(net: Network<f32>, seed_value: u64) -> Result<Self> {
        if !matches!(net.arch().head, Head::Classifier { .. }) {
            return Err(Error::param("target network needs a classifier head"));
        }
        Ok(Self {
            net,
            frozen: false,
            seed: seed_value,
            metrics: BTreeMap::new(),
        })
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }

    pub fn class_count(&self) -> usize {
        self.net.arch().outputs()
    }

    pub fn input_side(&self) -> usize {
        self.net.arch().in_side
    }

    pub fn macs(&self) -> u64 {
        self.net.arch().macs()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn params(&self) -> &[f32] {
        self.net.params()
    }

    /// Replaces the parameters. Fails on a frozen model.
    pub fn set_params(&mut self, params: Vec<f32>) -> Result<()> {
        if self.frozen {
            return Err(Error::Consistency("target classifier is frozen".into()));
        }
        self.net = Network::from_params(self.net.arch().clone(), params)?;
        Ok(())
    }

    /// Zeroes the head so every input maps to uniform probabilities.
    pub fn zero_head(&mut self) -> Result<()> {
        if self.frozen {
            return Err(Error::Consistency("target classifier is frozen".into()));
        }
        self.net.zero_head();
        Ok(())
    }

    pub fn metrics(&self) -> &BTreeMap<String, f64> {
        &self.metrics
    }

    pub fn set_metric(&mut self, key: &str, value: f64) {
        self.metrics.insert(key.to_string(), value);
    }

    fn input(&self, img: &Image) -> Result<Vec<f32>> {
        let a = self.net.arch();
        if img.height() != a.in_side || img.width() != a.in_side || img.channels() != a.in_channels
        {
            return Err(Error::dim(format!(
                "image {}x{}x{} does not match target input {}x{}x{}",
                img.height(),
                img.width(),
                img.channels(),
                a.in_side,
                a.in_side,
                a.in_channels
            )));
        }
        Ok(img.to_planar())
    }

    pub fn logits(&self, img: &Image) -> Result<Vec<f32>> {
        self.net.forward(&self.input(img)?)
    }

    /// Logits widened to `f64`; probabilities and losses are derived from
    /// these in double precision.
    pub fn logits_f64(&self, img: &Image) -> Result<Vec<f64>> {
        Ok(self.logits(img)?.iter().map(|&v| f64::from(v)).collect())
    }

    /// Class probabilities (softmax of the logits).
    pub fn forward(&self, img: &Image) -> Result<Vec<f32>> {
        Ok(self.probs_f64(img)?.into_iter().map(|p| p as f32).collect())
    }

    pub fn probs_f64(&self, img: &Image) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits_f64(img)?))
    }

    pub fn log_probs(&self, img: &Image) -> Result<Vec<f64>> {
        Ok(log_softmax(&self.logits_f64(img)?))
    }

    /// Top-1 accuracy in `[0, 1]`.
    pub fn accuracy(&self, data: &LabeledDataset) -> Result<f64> {
        if data.is_empty() {
            return Ok(f64::NAN);
        }
        let correct = data
            .images()
            .par_iter()
            .zip(data.labels())
            .map(|(img, &label)| Ok(usize::from(argmax(&self.logits(img)?) == label)))
            .collect::<Result<Vec<_>>>()?;
        Ok(correct.iter().sum::<usize>() as f64 / data.len() as f64)
    }

    /// SHA-256 of the architecture descriptor and parameter bytes.
    pub fn fingerprint(&self) -> String {
        fingerprint(&self.net)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            descriptor: format!("kind={KIND};{}", self.net.arch()),
            seed: self.seed,
            metrics: self.metrics.clone(),
            params: self.net.params().to_vec(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if !ck.descriptor.starts_with(&format!("kind={KIND};")) {
            return Err(Error::Format(format!(
                "checkpoint `{}` is not a target classifier",
                ck.descriptor
            )));
        }
        let arch = ArchSpec::parse(&ck.descriptor)?;
        let net = Network::from_params(arch, ck.params)?;
        let mut model = Self::from_network(net, ck.seed)?;
        model.metrics = ck.metrics;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

pub(crate) fn fingerprint(net: &Network<f32>) -> String {
    let mut bytes = net.arch().to_string().into_bytes();
    for p in net.params() {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    seed::sha256_hex(&bytes)
}

pub(crate) fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Random horizontal flip plus a random crop from the image zero-padded by
/// `pad` pixels, on a planar `c × side × side` buffer.
fn augment(planar: &[f32], c: usize, side: usize, pad: usize, rng: &mut impl Rng) -> Vec<f32> {
    let flip = rng.random::<bool>();
    let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let mut out = vec![0.0f32; planar.len()];
    let s = side as isize;
    for ch in 0..c {
        let src = &planar[ch * side * side..(ch + 1) * side * side];
        let dst = &mut out[ch * side * side..(ch + 1) * side * side];
        for y in 0..s {
            let sy = y + dy;
            if sy < 0 || sy >= s {
                continue;
            }
            for x in 0..s {
                let xx = if flip { s - 1 - x } else { x };
                let sx = xx + dx;
                if sx < 0 || sx >= s {
                    continue;
                }
                dst[(y * s + x) as usize] = src[(sy * s + sx) as usize];
            }
        }
    }
    out
}

/// Trains a target classifier with cross-entropy, random flips, and 4-pixel
/// pad-and-crop. Results are bitwise reproducible for a fixed seed,
/// independent of the rayon thread count.
pub fn train_target(
    data: &LabeledDataset,
    cfg: &TrainConfig,
    arch: &TargetArch,
) -> Result<(TargetClassifier, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::param("cannot train on an empty dataset"));
    }
    if data.class_count() != arch.classes {
        return Err(Error::Consistency(format!(
            "dataset has {} classes, architecture {}",
            data.class_count(),
            arch.classes
        )));
    }
    let mut model = TargetClassifier::new(arch, cfg.seed)?;
    let inputs = data
        .images()
        .iter()
        .map(|im| model.input(im))
        .collect::<Result<Vec<_>>>()?;
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let mut params = model.net.params().to_vec();
    let mut opt = Optimizer::new(cfg, &params, cfg.epochs * steps_per_epoch);
    let mut report = TrainReport::default();
    let (c, side) = (arch.in_channels, arch.in_side);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        rand::seq::SliceRandom::shuffle(
            &mut order[..],
            &mut seed::rng_for(&[cfg.seed, 1, epoch as u64]),
        );
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f32;
            let net = &model.net;
            let (loss, _, grad) = accumulate(batch, params.len(), |&i, grad| {
                let mut rng = seed::rng_for(&[cfg.seed, 2, epoch as u64, i as u64]);
                let x = augment(&inputs[i], c, side, 4, &mut rng);
                let trace = net.forward_train(&x, None)?;
                let logits: Vec<f64> = trace.output.iter().map(|&v| f64::from(v)).collect();
                let probs = softmax(&logits);
                let label = data.labels()[i];
                let loss = -probs[label].max(f64::MIN_POSITIVE).ln();
                let dlogits: Vec<f32> = probs
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| (p as f32 - if k == label { 1.0 } else { 0.0 }) * scale)
                    .collect();
                net.backward(&trace, &dlogits, grad);
                Ok(Some(loss))
            })?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, step {step} (lr {:.3e}, batch loss {loss})",
                    opt.current_lr()
                )));
            }
            epoch_loss += loss;
            opt.step(&mut params, &grad);
            model.net.params_mut().copy_from_slice(&params);
        }
        let mean = epoch_loss / data.len() as f64;
        log::info!("target epoch {}/{}: loss {mean:.4}", epoch + 1, cfg.epochs);
        report.epoch_losses.push(mean);
    }
    let final_params = opt.finish(params);
    model.net.params_mut().copy_from_slice(&final_params);
    if let Some(&last) = report.epoch_losses.last() {
        model.set_metric("final_train_loss", last);
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> TargetArch {
        TargetArch {
            in_channels: 3,
            in_side: 8,
            channels: vec![4, 8],
            classes: 3,
        }
    }

    #[test]
    fn zero_head_gives_uniform() {
        let mut m = TargetClassifier::new(&tiny_arch(), 1).unwrap();
        m.zero_head().unwrap();
        let p = m.forward(&Image::filled(8, 8, 3, 0.3).unwrap()).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-6));
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let m = TargetClassifier::new(&tiny_arch(), 1).unwrap();
        assert!(matches!(
            m.forward(&Image::filled(9, 8, 3, 0.3).unwrap()),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            m.forward(&Image::filled(8, 8, 1, 0.3).unwrap()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn frozen_model_rejects_mutation() {
        let mut m = TargetClassifier::new(&tiny_arch(), 1).unwrap();
        let before = m.fingerprint();
        m.freeze();
        assert!(m.set_params(vec![0.0; m.params().len()]).is_err());
        assert!(m.zero_head().is_err());
        assert_eq!(m.fingerprint(), before);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let mut m = TargetClassifier::new(&tiny_arch(), 4).unwrap();
        m.set_metric("clean_accuracy", 0.5);
        let back = TargetClassifier::from_checkpoint(
            Checkpoint::decode(&m.to_checkpoint().encode()).unwrap(),
        )
        .unwrap();
        let img = Image::filled(8, 8, 3, 0.7).unwrap();
        assert_eq!(m.logits(&img).unwrap(), back.logits(&img).unwrap());
        assert_eq!(back.metrics()["clean_accuracy"], 0.5);
        assert_eq!(m.fingerprint(), back.fingerprint());
    }

    #[test]
    fn augment_flip_and_shift() {
        let planar: Vec<f32> = (0..4).map(|v| v as f32).collect(); // 1 channel 2x2
        let mut rng = seed::rng_for(&[0]);
        for _ in 0..20 {
            let out = augment(&planar, 1, 2, 0, &mut rng);
            assert!(out == planar || out == vec![1.0, 0.0, 3.0, 2.0]);
        }
    }
}
