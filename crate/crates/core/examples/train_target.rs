//! Trains the target classifier on the synthetic shapes dataset and reports
//! clean test accuracy.
//!
//! ```text
//! cargo run --release --example train_target -- [epochs] [train_size]
//! ```

use std::time::Instant;

use instance_tta::dataio::gen_synthetic;
use instance_tta::nets::{train_target, TargetArch, TrainConfig};

fn main() -> instance_tta::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args
        .next()
        .map_or(Ok(8), |s| s.parse())
        .expect("epochs must be an integer");
    let n_train: usize = args
        .next()
        .map_or(Ok(2000), |s| s.parse())
        .expect("train size must be an integer");

    let all = gen_synthetic(n_train + 1000, 10, 32, 7)?;
    let train = all.subset(&(0..n_train).collect::<Vec<_>>());
    let test = all.subset(&(n_train..n_train + 1000).collect::<Vec<_>>());

    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::target_default()
    };
    let started = Instant::now();
    let (model, report) = train_target(&train, &cfg, &TargetArch::default())?;
    println!(
        "trained {epochs} epochs in {:.1}s",
        started.elapsed().as_secs_f64()
    );
    for (i, l) in report.epoch_losses.iter().enumerate() {
        println!("epoch {:>2}: loss {l:.4}", i + 1);
    }
    let started = Instant::now();
    let acc = model.accuracy(&test)?;
    println!(
        "clean test accuracy {:.2}% ({} images in {:.2}s)",
        100.0 * acc,
        test.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}
