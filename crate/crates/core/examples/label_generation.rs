//! Trains a small target, freezes it, and builds a relative-loss label store
//! for a handful of images (clean plus corrupted states). Shows a few records
//! and checks that a second call is a no-op.
//!
//! ```text
//! cargo run --release --example label_generation -- [images]
//! ```

use instance_tta::dataio::gen_synthetic;
use instance_tta::imgcore::default_space;
use instance_tta::labelgen::{generate_label_store, PerturbationPlan};
use instance_tta::nets::{train_target, TargetArch, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let n: usize = std::env::args()
        .nth(1)
        .map_or(Ok(40), |s| s.parse())
        .expect("image count must be an integer");
    let data = gen_synthetic(1500, 10, 32, 1)?;
    let cfg = TrainConfig {
        epochs: 8,
        ..TrainConfig::target_default()
    };
    let (mut target, _) = train_target(&data, &cfg, &TargetArch::default())?;
    target.freeze();

    let space = default_space();
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("labels.tsv");
    let images = data.head(n);
    let store = generate_label_store(
        &target,
        &images,
        &space,
        &PerturbationPlan::default(),
        &path,
        4,
    )?;
    println!(
        "{} records for {} images ({} transforms each)",
        store.len(),
        images.len(),
        space.len()
    );

    let names = space.names();
    for rec in store.records().iter().take(4) {
        let best = (0..names.len())
            .min_by(|&a, &b| rec.raw_losses[a].total_cmp(&rec.raw_losses[b]))
            .unwrap();
        println!(
            "image {:>3} {:<24} lowest loss {:.4} with {}",
            rec.id,
            rec.perturbation.to_string(),
            rec.raw_losses[best],
            names[best]
        );
    }

    let again = generate_label_store(
        &target,
        &images,
        &space,
        &PerturbationPlan::default(),
        &path,
        1,
    )?;
    println!(
        "rerun keeps {} records; canonical text identical: {}",
        again.len(),
        again.canonical_text() == store.canonical_text()
    );
    Ok(())
}
