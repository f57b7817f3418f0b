//! Training configuration, SGD with momentum, cosine annealing, parameter
//! EMA, and deterministic parallel gradient accumulation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak learning rate; annealed to 0 over all steps with a cosine.
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Per-tap feature dropout (predictor only).
    pub dropout: f64,
    /// Upper bound of the parameter EMA decay. The effective decay at update
    /// `t` is `min(ema_momentum, (1 + t) / (10 + t))`; 0 disables the EMA.
    pub ema_momentum: f64,
    pub seed: u64,
    /// Copies of each sampled image per batch (predictor only).
    pub batch_repeat: usize,
    /// Largest cutout square side as a fraction of the image side
    /// (predictor only).
    pub cutout_max: f64,
    /// Largest global gradient norm; larger gradients are rescaled to it.
    /// 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    /// Loss-predictor defaults.
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 200,
            batch_size: 128,
            weight_decay: 1e-5,
            dropout: 0.3,
            ema_momentum: 0.999,
            seed: 0,
            batch_repeat: 2,
            cutout_max: 0.5,
            grad_clip: 5.0,
        }
    }
}

impl TrainConfig {
    /// Target-classifier defaults.
    pub fn target_default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 24,
            batch_size: 64,
            weight_decay: 5e-4,
            dropout: 0.0,
            ema_momentum: 0.999,
            seed: 0,
            batch_repeat: 1,
            cutout_max: 0.0,
            grad_clip: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        let checks = [
            (
                self.learning_rate.is_finite() && self.learning_rate > 0.0,
                "learning_rate must be positive",
            ),
            (unit(self.momentum), "momentum must be in [0, 1)"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (
                self.weight_decay.is_finite() && self.weight_decay >= 0.0,
                "weight_decay must be >= 0",
            ),
            (unit(self.dropout), "dropout must be in [0, 1)"),
            (unit(self.ema_momentum), "ema_momentum must be in [0, 1)"),
            (self.batch_repeat >= 1, "batch_repeat must be >= 1"),
            (
                (0.0..=1.0).contains(&self.cutout_max),
                "cutout_max must be in [0, 1]",
            ),
            (
                self.grad_clip.is_finite() && self.grad_clip >= 0.0,
                "grad_clip must be >= 0",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.to_string()));
            }
        }
        Ok(())
    }
}

/// SGD with momentum, L2 weight decay, cosine learning-rate annealing to 0,
/// and an exponential moving average of the parameters.
#[derive(Debug)]
pub struct Optimizer {
    lr: f64,
    momentum: f32,
    weight_decay: f32,
    grad_clip: f64,
    ema_cap: f64,
    total_steps: usize,
    step: usize,
    velocity: Vec<f32>,
    ema: Option<Vec<f32>>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, params: &[f32], total_steps: usize) -> Self {
        Self {
            lr: cfg.learning_rate,
            momentum: cfg.momentum as f32,
            weight_decay: cfg.weight_decay as f32,
            grad_clip: cfg.grad_clip,
            ema_cap: cfg.ema_momentum,
            total_steps: total_steps.max(1),
            step: 0,
            velocity: vec![0.0; params.len()],
            ema: (cfg.ema_momentum > 0.0).then(|| params.to_vec()),
        }
    }

    pub fn current_lr(&self) -> f64 {
        let progress = self.step.min(self.total_steps) as f64 / self.total_steps as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// Applies one update with the batch-mean gradient `grad`.
    pub fn step(&mut self, params: &mut [f32], grad: &[f32]) {
        let lr = self.current_lr() as f32;
        let mut gscale = 1.0f32;
        if self.grad_clip > 0.0 {
            let norm = grad
                .iter()
                .map(|&g| f64::from(g) * f64::from(g))
                .sum::<f64>()
                .sqrt();
            if norm > self.grad_clip {
                gscale = (self.grad_clip / norm) as f32;
            }
        }
        for ((p, &g), v) in params.iter_mut().zip(grad).zip(&mut self.velocity) {
            *v = self.momentum * *v + gscale * g + self.weight_decay * *p;
            *p -= lr * *v;
        }
        if let Some(ema) = &mut self.ema {
            let t = self.step as f64;
            let decay = self.ema_cap.min((1.0 + t) / (10.0 + t)) as f32;
            for (e, &p) in ema.iter_mut().zip(params.iter()) {
                *e = decay * *e + (1.0 - decay) * p;
            }
        }
        self.step += 1;
    }

    /// Parameters to publish at the end of training: the EMA when enabled.
    pub fn finish(self, params: Vec<f32>) -> Vec<f32> {
        self.ema.unwrap_or(params)
    }
}

/// Jobs per work unit. The partition is fixed, so results do not depend on
/// the number of worker threads.
const CHUNK: usize = 4;

/// Sum of per-job losses and gradients over `jobs`, plus the number of jobs
/// that produced a value. Jobs run in parallel in fixed-size chunks whose
/// partial sums are combined in job order, making the result bitwise
/// reproducible for any thread count.
pub fn accumulate<J, F>(jobs: &[J], param_len: usize, f: F) -> Result<(f64, usize, Vec<f32>)>
where
    J: Sync,
    F: Fn(&J, &mut [f32]) -> Result<Option<f64>> + Sync,
{
    let partials: Vec<Result<(f64, usize, Vec<f32>)>> = jobs
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0f32; param_len];
            let mut loss = 0.0;
            let mut n = 0;
            for job in chunk {
                if let Some(l) = f(job, &mut grad)? {
                    loss += l;
                    n += 1;
                }
            }
            Ok((loss, n, grad))
        })
        .collect();
    let mut total = vec![0.0f32; param_len];
    let mut loss = 0.0;
    let mut count = 0;
    for part in partials {
        let (l, n, g) = part?;
        loss += l;
        count += n;
        total.iter_mut().zip(&g).for_each(|(t, v)| *t += v);
    }
    Ok((loss, count, total))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut opt = Optimizer::new(&cfg, &[0.0], 10);
        assert!((opt.current_lr() - 0.1).abs() < 1e-12);
        let mut p = vec![0.0];
        for _ in 0..5 {
            opt.step(&mut p, &[0.0]);
        }
        assert!((opt.current_lr() - 0.05).abs() < 1e-12);
        for _ in 0..5 {
            opt.step(&mut p, &[0.0]);
        }
        assert!(opt.current_lr().abs() < 1e-12);
    }

    #[test]
    fn sgd_descends_quadratic() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ema_momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = vec![4.0f32];
        let mut opt = Optimizer::new(&cfg, &p, 200);
        for _ in 0..200 {
            let g = [2.0 * p[0]];
            opt.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-2, "{}", p[0]);
    }

    #[test]
    fn clipping_bounds_the_first_step() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            momentum: 0.0,
            weight_decay: 0.0,
            grad_clip: 2.0,
            ..TrainConfig::default()
        };
        let mut opt = Optimizer::new(&cfg, &[0.0, 0.0], 10);
        let mut p = vec![0.0, 0.0];
        opt.step(&mut p, &[300.0, 400.0]);
        assert!(
            (p[0] + 1.2).abs() < 1e-6 && (p[1] + 1.6).abs() < 1e-6,
            "{p:?}"
        );
        let mut opt = Optimizer::new(&cfg, &[0.0], 10);
        let mut q = vec![0.0];
        opt.step(&mut q, &[0.5]);
        assert_eq!(q, vec![-0.5]);
    }

    #[test]
    fn validation_rejects_bad_rates() {
        assert!(TrainConfig {
            dropout: 1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig::target_default().validate().is_ok());
    }

    #[test]
    fn accumulation_is_thread_count_independent() {
        let jobs: Vec<u32> = (0..37).collect();
        let f = |j: &u32, g: &mut [f32]| {
            g[0] += (*j as f32).sqrt() * 0.1;
            g[1] += 1.0 / (*j as f32 + 1.0);
            Ok(Some(f64::from(*j)))
        };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| accumulate(&jobs, 2, f).unwrap())
        };
        let a = run(1);
        let b = run(8);
        assert_eq!(a.1, 37);
        assert_eq!(a.2, b.2);
        assert_eq!(a.0, b.0);
    }
}
