//! A small convolutional backbone with either a classifier head or a
//! multi-level tap head, plus explicit forward and backward passes.
//!
//! Each stage is `conv3x3 -> ReLU -> maxpool2`. Inputs are planar
//! `[channel][y][x]` tensors in `[0, 1]`, centred by subtracting 0.5.
//!
//! Parameter layout (flat vector), per stage: conv weight
//! `(c_out × c_in·9)` then bias `(c_out)`. Classifier head: weight
//! `(classes × c_last)`, bias. Tap head: for each stage a projection weight
//! `(width × c_stage)` and bias, then the output weight
//! `(outputs × stages·width)` and bias.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::kernels::{self, Real};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Head {
    /// Global average pool of the last stage, then a linear layer.
    Classifier { classes: usize },
    /// Global average pool of every stage, each projected to `width` with a
    /// ReLU, concatenated, then a linear layer to `outputs`.
    MultiTap { width: usize, outputs: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub in_channels: usize,
    pub in_side: usize,
    pub stages: Vec<usize>,
    pub head: Head,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
    n_in: usize,
    n_out: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    conv: Vec<(usize, usize)>,
    taps: Vec<Linear>,
    out: Linear,
    total: usize,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stages.is_empty() || self.stages.contains(&0) {
            return Err(Error::param(format!("invalid architecture {self}")));
        }
        if self.in_side >> self.stages.len() == 0 {
            return Err(Error::param(format!(
                "input side {} too small for {} stages",
                self.in_side,
                self.stages.len()
            )));
        }
        match self.head {
            Head::Classifier { classes: 0 } => Err(Error::param("classifier needs classes > 0")),
            Head::MultiTap { width, outputs } if width == 0 || outputs == 0 => {
                Err(Error::param("tap head needs width and outputs > 0"))
            }
            _ => Ok(()),
        }
    }

    pub fn outputs(&self) -> usize {
        match self.head {
            Head::Classifier { classes } => classes,
            Head::MultiTap { outputs, .. } => outputs,
        }
    }

    /// `(c_in, c_out, side)` for each stage, where `side` is the stage's
    /// input resolution.
    fn stage_dims(&self) -> Vec<(usize, usize, usize)> {
        let mut c_in = self.in_channels;
        let mut side = self.in_side;
        self.stages
            .iter()
            .map(|&c_out| {
                let d = (c_in, c_out, side);
                c_in = c_out;
                side /= 2;
                d
            })
            .collect()
    }

    fn layout(&self) -> Layout {
        let mut off = 0;
        let mut conv = Vec::new();
        for (c_in, c_out, _) in self.stage_dims() {
            let w = off;
            off += c_out * c_in * 9;
            conv.push((w, off));
            off += c_out;
        }
        let mut lin = |n_in: usize, n_out: usize| {
            let l = Linear {
                w: off,
                b: off + n_in * n_out,
                n_in,
                n_out,
            };
            off += n_in * n_out + n_out;
            l
        };
        let (taps, out) = match self.head {
            Head::Classifier { classes } => {
                (Vec::new(), lin(*self.stages.last().unwrap(), classes))
            }
            Head::MultiTap { width, outputs } => {
                let taps: Vec<Linear> = self.stages.iter().map(|&c| lin(c, width)).collect();
                let out = lin(width * self.stages.len(), outputs);
                (taps, out)
            }
        };
        Layout {
            conv,
            taps,
            out,
            total: off,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    /// Multiply-accumulate count of one forward pass.
    pub fn macs(&self) -> u64 {
        let conv: u64 = self
            .stage_dims()
            .iter()
            .map(|&(c_in, c_out, side)| (side * side * c_in * 9 * c_out) as u64)
            .sum();
        let l = self.layout();
        let head: u64 = l
            .taps
            .iter()
            .chain(std::iter::once(&l.out))
            .map(|t| (t.n_in * t.n_out) as u64)
            .sum();
        conv + head
    }

    pub fn parse(descriptor: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad architecture descriptor `{descriptor}`"));
        let mut in_dims = None;
        let mut stages = None;
        let mut head = None;
        for part in descriptor.split(';') {
            let (key, value) = part.split_once('=').ok_or_else(bad)?;
            match key {
                "in" => {
                    let (c, s) = value.split_once('x').ok_or_else(bad)?;
                    in_dims = Some((c.parse().map_err(|_| bad())?, s.parse().map_err(|_| bad())?));
                }
                "stages" => {
                    stages = Some(
                        value
                            .split(',')
                            .map(|v| v.parse::<usize>().map_err(|_| bad()))
                            .collect::<Result<Vec<_>>>()?,
                    );
                }
                "head" => {
                    let fields: Vec<&str> = value.split(':').collect();
                    head = Some(match fields.as_slice() {
                        ["classes", n] => Head::Classifier {
                            classes: n.parse().map_err(|_| bad())?,
                        },
                        ["taps", w, o] => Head::MultiTap {
                            width: w.parse().map_err(|_| bad())?,
                            outputs: o.parse().map_err(|_| bad())?,
                        },
                        _ => return Err(bad()),
                    });
                }
                _ => {}
            }
        }
        let (in_channels, in_side) = in_dims.ok_or_else(bad)?;
        let spec = ArchSpec {
            in_channels,
            in_side,
            stages: stages.ok_or_else(bad)?,
            head: head.ok_or_else(bad)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stages: Vec<String> = self.stages.iter().map(ToString::to_string).collect();
        write!(
            f,
            "in={}x{};stages={};head=",
            self.in_channels,
            self.in_side,
            stages.join(",")
        )?;
        match self.head {
            Head::Classifier { classes } => write!(f, "classes:{classes}"),
            Head::MultiTap { width, outputs } => write!(f, "taps:{width}:{outputs}"),
        }
    }
}

/// Activations recorded by [`Network::forward_train`] for the backward pass.
#[derive(Debug)]
pub struct Trace<T> {
    cols: Vec<Vec<T>>,
    act: Vec<Vec<T>>,
    pool_idx: Vec<Vec<u32>>,
    gaps: Vec<Vec<T>>,
    proj: Vec<Vec<T>>,
    tap_scale: Vec<T>,
    concat: Vec<T>,
    pub output: Vec<T>,
}

impl<T: Real> Trace<T> {
    /// Whether dropout removed every tap, leaving an output that does not
    /// depend on the input.
    pub fn all_taps_dropped(&self) -> bool {
        !self.tap_scale.is_empty() && self.tap_scale.iter().all(|&s| s == T::zero())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    arch: ArchSpec,
    params: Vec<T>,
}

impl<T: Real> Network<T> {
    /// He-initialized network, deterministic in `rng`.
    pub fn init(arch: ArchSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let mut params = vec![T::zero(); layout.total];
        let mut fill = |range: std::ops::Range<usize>, std: f64, rng: &mut ChaCha8Rng| {
            let dist = Normal::new(0.0, std).expect("finite std");
            for p in &mut params[range] {
                *p = T::from_f64(dist.sample(rng));
            }
        };
        for ((c_in, _, _), &(w, b)) in arch.stage_dims().iter().zip(&layout.conv) {
            fill(w..b, (2.0 / (c_in * 9) as f64).sqrt(), rng);
        }
        for t in &layout.taps {
            fill(t.w..t.b, (2.0 / t.n_in as f64).sqrt(), rng);
        }
        fill(
            layout.out.w..layout.out.b,
            (1.0 / layout.out.n_in as f64).sqrt(),
            rng,
        );
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: ArchSpec, params: Vec<T>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::dim(format!(
                "{} parameters supplied, architecture {arch} needs {}",
                params.len(),
                arch.param_count()
            )));
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Zeroes the output layer, making every output 0.
    pub fn zero_head(&mut self) {
        let out = self.arch.layout().out;
        self.params[out.w..out.b + out.n_out]
            .iter_mut()
            .for_each(|p| *p = T::zero());
    }

    pub fn input_len(&self) -> usize {
        self.arch.in_channels * self.arch.in_side * self.arch.in_side
    }

    fn check_input(&self, input: &[T]) -> Result<()> {
        if input.len() != self.input_len() {
            return Err(Error::dim(format!(
                "input of {} values, network expects {}x{}x{}",
                input.len(),
                self.arch.in_channels,
                self.arch.in_side,
                self.arch.in_side
            )));
        }
        Ok(())
    }

    /// Inference pass (no dropout).
    pub fn forward(&self, input: &[T]) -> Result<Vec<T>> {
        Ok(self.run(input, None, false)?.output)
    }

    /// Training pass. With `dropout = Some((rate, rng))`, each tap feature
    /// vector is dropped with probability `rate` (inverted scaling).
    pub fn forward_train(
        &self,
        input: &[T],
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<Trace<T>> {
        self.run(input, dropout, true)
    }

    fn run(
        &self,
        input: &[T],
        mut dropout: Option<(f64, &mut ChaCha8Rng)>,
        keep: bool,
    ) -> Result<Trace<T>> {
        self.check_input(input)?;
        let layout = self.arch.layout();
        let p = &self.params;
        let half = T::from_f64(0.5);
        let mut x: Vec<T> = input.iter().map(|&v| v - half).collect();
        let mut trace = Trace {
            cols: Vec::new(),
            act: Vec::new(),
            pool_idx: Vec::new(),
            gaps: Vec::new(),
            proj: Vec::new(),
            tap_scale: Vec::new(),
            concat: Vec::new(),
            output: Vec::new(),
        };
        let mut stage_gaps = Vec::with_capacity(self.arch.stages.len());
        for (&(c_in, c_out, side), &(w, b)) in self.arch.stage_dims().iter().zip(&layout.conv) {
            let hw = side * side;
            let k = c_in * 9;
            let mut cols = vec![T::zero(); k * hw];
            kernels::im2col3x3(&x, c_in, side, side, &mut cols);
            let mut act = vec![T::zero(); c_out * hw];
            kernels::conv_forward(&cols, &p[w..b], &p[b..b + c_out], c_out, k, hw, &mut act);
            kernels::relu_inplace(&mut act);
            let mut idx = Vec::new();
            let pooled = kernels::maxpool2(&act, c_out, side, side, keep.then_some(&mut idx));
            let phw = (side / 2) * (side / 2);
            stage_gaps.push(kernels::global_avg_pool(&pooled, c_out, phw));
            if keep {
                trace.cols.push(cols);
                trace.act.push(act);
                trace.pool_idx.push(idx);
            }
            x = pooled;
        }
        match self.arch.head {
            Head::Classifier { .. } => {
                let gap = stage_gaps.pop().expect("at least one stage");
                let o = layout.out;
                trace.output = kernels::linear(&gap, &p[o.w..o.b], &p[o.b..o.b + o.n_out], o.n_out);
                trace.gaps.push(gap);
            }
            Head::MultiTap { width, .. } => {
                let mut concat = Vec::with_capacity(width * stage_gaps.len());
                for (gap, t) in stage_gaps.into_iter().zip(&layout.taps) {
                    let z = kernels::linear(&gap, &p[t.w..t.b], &p[t.b..t.b + t.n_out], t.n_out);
                    let scale = match dropout.as_mut() {
                        Some((rate, rng)) if *rate > 0.0 => {
                            if rng.random::<f64>() < *rate {
                                T::zero()
                            } else {
                                T::from_f64(1.0 / (1.0 - *rate))
                            }
                        }
                        _ => T::one(),
                    };
                    concat.extend(z.iter().map(|&v| v.max(T::zero()) * scale));
                    trace.gaps.push(gap);
                    trace.proj.push(z);
                    trace.tap_scale.push(scale);
                }
                let o = layout.out;
                trace.output =
                    kernels::linear(&concat, &p[o.w..o.b], &p[o.b..o.b + o.n_out], o.n_out);
                trace.concat = concat;
            }
        }
        Ok(trace)
    }

    /// Accumulates `dL/dparams` into `grad` given `dL/doutput`.
    pub fn backward(&self, trace: &Trace<T>, grad_output: &[T], grad: &mut [T]) {
        assert_eq!(grad.len(), self.params.len());
        assert_eq!(grad_output.len(), self.arch.outputs());
        let layout = self.arch.layout();
        let p = &self.params;
        let n_stages = self.arch.stages.len();
        let mut tap_grads: Vec<Option<Vec<T>>> = vec![None; n_stages];

        let o = layout.out;
        match self.arch.head {
            Head::Classifier { .. } => {
                let (gw, gb) = grad.split_at_mut(o.b);
                let g = kernels::linear_backward(
                    &trace.gaps[0],
                    &p[o.w..o.b],
                    grad_output,
                    &mut gw[o.w..],
                    &mut gb[..o.n_out],
                );
                tap_grads[n_stages - 1] = Some(g);
            }
            Head::MultiTap { width, .. } => {
                let (gw, gb) = grad.split_at_mut(o.b);
                let gconcat = kernels::linear_backward(
                    &trace.concat,
                    &p[o.w..o.b],
                    grad_output,
                    &mut gw[o.w..],
                    &mut gb[..o.n_out],
                );
                for (s, t) in layout.taps.iter().enumerate() {
                    let scale = trace.tap_scale[s];
                    if scale == T::zero() {
                        continue;
                    }
                    let dz: Vec<T> = gconcat[s * width..(s + 1) * width]
                        .iter()
                        .zip(&trace.proj[s])
                        .map(|(&g, &z)| if z > T::zero() { g * scale } else { T::zero() })
                        .collect();
                    let (gw, gb) = grad.split_at_mut(t.b);
                    let g = kernels::linear_backward(
                        &trace.gaps[s],
                        &p[t.w..t.b],
                        &dz,
                        &mut gw[t.w..],
                        &mut gb[..t.n_out],
                    );
                    tap_grads[s] = Some(g);
                }
            }
        }

        let dims = self.arch.stage_dims();
        let mut carried: Option<Vec<T>> = None;
        for s in (0..n_stages).rev() {
            let (c_in, c_out, side) = dims[s];
            let hw = side * side;
            let phw = (side / 2) * (side / 2);
            let mut dpooled = carried
                .take()
                .unwrap_or_else(|| vec![T::zero(); c_out * phw]);
            if let Some(g) = &tap_grads[s] {
                let inv = T::one() / T::from_f64(phw as f64);
                for c in 0..c_out {
                    let v = g[c] * inv;
                    dpooled[c * phw..(c + 1) * phw]
                        .iter_mut()
                        .for_each(|d| *d += v);
                }
            }
            let mut dact = vec![T::zero(); c_out * hw];
            for (&i, &g) in trace.pool_idx[s].iter().zip(&dpooled) {
                dact[i as usize] += g;
            }
            for (d, &a) in dact.iter_mut().zip(&trace.act[s]) {
                if a <= T::zero() {
                    *d = T::zero();
                }
            }
            let (w, b) = layout.conv[s];
            let k = c_in * 9;
            let (gw, gb) = grad.split_at_mut(b);
            if s > 0 {
                let mut dcols = vec![T::zero(); k * hw];
                kernels::conv_backward(
                    &trace.cols[s],
                    &p[w..b],
                    &dact,
                    c_out,
                    k,
                    hw,
                    &mut gw[w..],
                    &mut gb[..c_out],
                    Some(&mut dcols),
                );
                let mut dinput = vec![T::zero(); c_in * hw];
                kernels::col2im3x3_add(&dcols, c_in, side, side, &mut dinput);
                carried = Some(dinput);
            } else {
                kernels::conv_backward(
                    &trace.cols[s],
                    &p[w..b],
                    &dact,
                    c_out,
                    k,
                    hw,
                    &mut gw[w..],
                    &mut gb[..c_out],
                    None,
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn tiny(head: Head) -> ArchSpec {
        ArchSpec {
            in_channels: 1,
            in_side: 8,
            stages: vec![2, 3],
            head,
        }
    }

    #[test]
    fn descriptor_round_trip() {
        for head in [
            Head::Classifier { classes: 10 },
            Head::MultiTap {
                width: 32,
                outputs: 12,
            },
        ] {
            let a = ArchSpec {
                in_channels: 3,
                in_side: 32,
                stages: vec![8, 16, 32],
                head,
            };
            assert_eq!(ArchSpec::parse(&a.to_string()).unwrap(), a);
        }
        assert!(ArchSpec::parse("in=3x32;stages=;head=classes:1").is_err());
    }

    #[test]
    fn param_count_matches_layout() {
        let a = tiny(Head::Classifier { classes: 3 });
        assert_eq!(a.param_count(), (2 * 9 + 2) + (3 * 2 * 9 + 3) + (3 * 3 + 3));
        let net = Network::<f64>::init(a, &mut seed::rng_for(&[1])).unwrap();
        assert_eq!(net.forward(&vec![0.5; 64]).unwrap().len(), 3);
        assert!(net.forward(&vec![0.5; 63]).is_err());
    }

    #[test]
    fn macs_of_default_backbones() {
        let target = ArchSpec {
            in_channels: 3,
            in_side: 32,
            stages: vec![32, 64, 128],
            head: Head::Classifier { classes: 10 },
        };
        assert_eq!(target.macs(), 884_736 + 4_718_592 + 4_718_592 + 1_280);
    }

    #[test]
    fn inference_and_training_passes_agree_without_dropout() {
        let net = Network::<f64>::init(
            tiny(Head::MultiTap {
                width: 2,
                outputs: 4,
            }),
            &mut seed::rng_for(&[2]),
        )
        .unwrap();
        let x: Vec<f64> = (0..64)
            .map(|i| (i as f64 * 0.3).sin() * 0.5 + 0.5)
            .collect();
        let a = net.forward(&x).unwrap();
        let b = net.forward_train(&x, None).unwrap().output;
        assert_eq!(a, b);
    }
}
