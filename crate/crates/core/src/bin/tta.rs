use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use instance_tta::pipeline::{Command, Pipeline, PipelineConfig};
use instance_tta::Error;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    TrainTarget,
    GenLabels,
    TrainPredictor,
    Corrupt,
    Eval,
    Report,
    /// Every step in order.
    All,
}

/// Instance-aware test-time augmentation pipeline.
#[derive(Parser, Debug)]
#[command(version)]
struct Cli {
    #[arg(value_enum)]
    command: Cmd,
    /// TOML config; defaults apply for anything omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (also `TTA_THREADS`); 1 gives bit-reproducible runs.
    #[arg(long, env = "TTA_THREADS")]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let out = cli
        .out
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("tta-out"));
    let pipeline = Pipeline::new(config, out)?;
    let cmd = match cli.command {
        Cmd::TrainTarget => Command::TrainTarget,
        Cmd::GenLabels => Command::GenLabels,
        Cmd::TrainPredictor => Command::TrainPredictor,
        Cmd::Corrupt => Command::Corrupt,
        Cmd::Eval => Command::Eval,
        Cmd::Report => Command::Report,
        Cmd::All => return pipeline.run_all(),
    };
    pipeline.run(cmd).map(|_| ())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
