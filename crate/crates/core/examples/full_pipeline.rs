//! Runs every pipeline stage (train-target, gen-labels, train-predictor,
//! corrupt, eval, report) and prints the comparison table. Without a config
//! the predictor and evaluation are scaled down to finish in a few minutes.
//! Pass a TOML file to run anything else (an empty file gives the reference
//! setup).
//!
//! ```text
//! cargo run --release --example full_pipeline -- [config.toml] [out_dir]
//! ```

use std::fs;
use std::path::PathBuf;

use instance_tta::pipeline::{Pipeline, PipelineConfig};

const QUICK: &str = r#"
[dataset]
test = 300

[predictor.train]
epochs = 40

[eval]
max_per_corrupted_cell = 40
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let config = match args.next() {
        Some(path) => PipelineConfig::load(path.as_ref())?,
        None => PipelineConfig::from_toml(QUICK)?,
    };
    let out = args
        .next()
        .map_or_else(|| PathBuf::from("tta-out"), PathBuf::from);
    let pipeline = Pipeline::new(config, out.clone())?;
    pipeline.run_all()?;
    let table = fs::read_to_string(out.join("comparison.csv"))?;
    println!("\n{table}");
    Ok(())
}
