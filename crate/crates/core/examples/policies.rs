//! Trains a small target and loss predictor, then runs every selection
//! policy on noisy test images. Prints what each policy picked for the first
//! few images, then error, forward passes and relative cost over the set.
//!
//! ```text
//! cargo run --release --example policies
//! ```

use instance_tta::corruptions::{corrupt_in_memory, CorruptionKind, CorruptionSpec};
use instance_tta::dataio::gen_synthetic;
use instance_tta::evalbench::relative_cost;
use instance_tta::imgcore::default_space;
use instance_tta::labelgen::{generate_label_store, PerturbationPlan};
use instance_tta::nets::{train_predictor, train_target, PredictorArch, TargetArch, TrainConfig};
use instance_tta::ttapolicy::{predict, SelectionPolicy};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let all = gen_synthetic(2200, 10, 32, 5)?;
    let train = all.subset(&(0..2000).collect::<Vec<_>>());
    let test = all.subset(&(2000..2200).collect::<Vec<_>>());
    let space = default_space();

    let (mut target, _) = train_target(
        &train,
        &TrainConfig {
            epochs: 8,
            ..TrainConfig::target_default()
        },
        &TargetArch::default(),
    )?;
    target.freeze();
    let dir = tempfile::tempdir()?;
    let labelled = train.head(500);
    let store = generate_label_store(
        &target,
        &labelled,
        &space,
        &PerturbationPlan::default(),
        &dir.path().join("l.tsv"),
        4,
    )?;
    let pcfg = TrainConfig {
        epochs: 80,
        ..TrainConfig::default()
    };
    let (predictor, _) = train_predictor(
        &store,
        &labelled,
        &space,
        &pcfg,
        &Default::default(),
        &PredictorArch::default(),
    )?;

    let noisy = corrupt_in_memory(
        &test,
        &CorruptionSpec::new(CorruptionKind::GaussianNoise, 4, 9)?,
    )?;
    let names = space.names();
    let policies: Vec<SelectionPolicy> = [
        "identity",
        "hflip",
        "five_crop",
        "ten_crop",
        "random:1",
        "ours:1",
        "ours:2+flip",
        "oracle:1",
    ]
    .iter()
    .map(|s| s.parse())
    .collect::<Result<_, _>>()?;
    let mut wrong = vec![0usize; policies.len()];
    let mut passes = vec![0usize; policies.len()];
    for (i, img) in noisy.images().iter().enumerate() {
        let label = noisy.labels()[i];
        if i < 3 {
            println!("image {i} (label {label})");
        }
        for (j, policy) in policies.iter().enumerate() {
            let p = predict(
                policy,
                &target,
                Some(&predictor),
                img,
                Some(label),
                &space,
                i as u64,
            )?;
            wrong[j] += usize::from(p.predicted_class() != label);
            passes[j] += p.inference_count;
            if i < 3 {
                let chosen: Vec<&str> = p.chosen.iter().map(|&c| names[c].as_str()).collect();
                let chosen = if policy.is_selector() {
                    chosen.join(" ")
                } else {
                    String::new()
                };
                println!(
                    "  {:<12} class {} {chosen}",
                    policy.to_string(),
                    p.predicted_class()
                );
            }
        }
    }

    println!("\n{} images, gaussian_noise severity 4", noisy.len());
    println!(
        "{:<12} {:>7} {:>7} {:>6}",
        "policy", "error%", "passes", "cost"
    );
    for (j, policy) in policies.iter().enumerate() {
        println!(
            "{:<12} {:>7.1} {:>7.2} {:>6.3}",
            policy.to_string(),
            100.0 * wrong[j] as f64 / noisy.len() as f64,
            passes[j] as f64 / noisy.len() as f64,
            relative_cost(policy, target.macs(), predictor.macs())
        );
    }
    Ok(())
}
