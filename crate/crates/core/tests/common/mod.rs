#![allow(dead_code)]

use instance_tta::imgcore::Image;
use instance_tta::nets::{Network, TargetArch, TargetClassifier};
use instance_tta::seed;
use rand::Rng;

pub fn tiny_arch() -> TargetArch {
    TargetArch {
        in_channels: 3,
        in_side: 16,
        channels: vec![4, 8],
        classes: 3,
    }
}

pub fn tiny_target(seed_value: u64) -> TargetClassifier {
    let mut t = TargetClassifier::new(&tiny_arch(), seed_value).unwrap();
    t.freeze();
    t
}

/// Target whose logits are `bias` for every input (all weights zero).
pub fn constant_target(bias: &[f32]) -> TargetClassifier {
    let arch = TargetArch {
        classes: bias.len(),
        ..tiny_arch()
    };
    let spec = arch.spec();
    let mut params = vec![0.0f32; spec.param_count()];
    let n = params.len();
    params[n - bias.len()..].copy_from_slice(bias);
    let mut t =
        TargetClassifier::from_network(Network::from_params(spec, params).unwrap(), 0).unwrap();
    t.freeze();
    t
}

pub fn random_image(side: usize, seed_value: u64) -> Image {
    let mut rng = seed::rng_for(&[seed_value, 99]);
    let data = (0..side * side * 3)
        .map(|_| rng.random_range(0.0f32..=1.0))
        .collect();
    Image::new(side, side, 3, data).unwrap()
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xs[i];
            xs[i] = orig + h;
            let up = f(&xs);
            xs[i] = orig - h;
            let down = f(&xs);
            xs[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Whether `a` and `n` agree within relative error `tol` (with a small
/// absolute floor for near-zero entries).
pub fn close(a: f64, n: f64, tol: f64) -> bool {
    (a - n).abs() <= tol * a.abs().max(n.abs()) + 1e-8
}
