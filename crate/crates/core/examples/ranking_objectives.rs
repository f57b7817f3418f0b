//! Compares the differentiable ranking objectives with exact Spearman
//! correlation as the temperature shrinks, and follows plain gradient
//! descent on the soft objective from a random start.
//!
//! ```text
//! cargo run --release --example ranking_objectives
//! ```

use instance_tta::ranking::{exact_spearman, pairwise_margin_loss, soft_spearman_loss};
use instance_tta::seed;
use rand::Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = seed::rng_for(&[42]);
    let truth: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
    let pred: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
    let exact = exact_spearman(&pred, &truth)?;
    println!("exact Spearman {exact:.4}");
    for t in [1.0, 0.1, 0.01, 0.001] {
        let (loss, _) = soft_spearman_loss(&pred, &truth, t)?;
        println!("temperature {t:<6} 1 - soft Spearman {:.4}", 1.0 - loss);
    }

    let mut x = pred.clone();
    for step in 0..=200 {
        let (loss, g) = soft_spearman_loss(&x, &truth, 0.1)?;
        if step % 50 == 0 {
            let margin = pairwise_margin_loss(&x, &truth, 0.05)?.0;
            println!("step {step:>3}: soft loss {loss:.4}, exact Spearman {:.4}, margin loss {margin:.4}", exact_spearman(&x, &truth)?);
        }
        x.iter_mut().zip(&g).for_each(|(v, d)| *v -= 0.05 * d);
    }
    Ok(())
}
