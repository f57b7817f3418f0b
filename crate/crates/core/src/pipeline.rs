//! Config-driven end-to-end driver: each command reads its prerequisites
//! from the output directory, writes its artifacts there, and records a run
//! manifest with input and output fingerprints.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corruptions::{corrupt_dataset, CorruptionKind, CorruptionSpec, OutputFormat};
use crate::dataio::{
    self, gen_synthetic, load_cifar_binary, load_manifest_sets, split, EvalSet, LabeledDataset,
    SplitSpec,
};
use crate::error::{Error, Result};
use crate::evalbench::{
    comparison_table, evaluate_policies, read_reports, write_reports, EvalOptions,
};
use crate::imgcore::{default_space, Transform, TransformSpace};
use crate::labelgen::{generate_label_store, LabelStore, PerturbationPlan};
use crate::nets::{
    mean_spearman, train_predictor, train_target, LossPredictor, PredictorArch, TargetArch,
    TargetClassifier, TrainConfig,
};
use crate::ranking::RankingObjectiveConfig;
use crate::seed;
use crate::ttapolicy::SelectionPolicy;

pub const TARGET_FILE: &str = "target.ckpt";
pub const LABELS_FILE: &str = "labels.tsv";
pub const PREDICTOR_FILE: &str = "predictor.ckpt";
pub const CORRUPTED_DIR: &str = "corrupted";
pub const EVAL_DIR: &str = "eval";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const RUNS_DIR: &str = "runs";
const LOCK_FILE: &str = ".tta.lock";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    CifarBinary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// Synthetic sizes.
    pub train: usize,
    pub test: usize,
    pub classes: usize,
    pub side: usize,
    /// CIFAR-style binary files (3073-byte records).
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            train: 2000,
            test: 1000,
            classes: 10,
            side: 32,
            train_path: None,
            test_path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub loss_train_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            loss_train_fraction: SplitSpec::default().loss_train_fraction,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformsConfig {
    /// Replaces the default space, e.g. `["rotate:-20", "identity"]`.
    pub space: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptConfig {
    pub kinds: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
    pub format: OutputFormat,
}

impl Default for CorruptConfig {
    fn default() -> Self {
        Self {
            kinds: CorruptionKind::ALL.to_vec(),
            severities: vec![1, 2, 3, 4, 5],
            format: OutputFormat::Binary,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    pub arch: TargetArch,
    pub train: TrainConfig,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            arch: TargetArch::default(),
            train: TrainConfig::target_default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelsConfig {
    pub corrupted_per_image: Option<usize>,
    pub kinds: Option<Vec<CorruptionKind>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub arch: PredictorArch,
    pub train: TrainConfig,
    pub objective: RankingObjectiveConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub policies: Vec<SelectionPolicy>,
    pub max_per_corrupted_cell: Option<usize>,
    pub max_clean: Option<usize>,
    pub held_out_correlation: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let policies = [
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
        .map(|s| s.parse().expect("valid policy name"))
        .collect();
        Self {
            policies,
            max_per_corrupted_cell: None,
            max_clean: None,
            held_out_correlation: true,
        }
    }
}

/// Everything a pipeline run depends on. An empty TOML file yields the
/// reference synthetic experiment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    pub transforms: TransformsConfig,
    pub corrupt: CorruptConfig,
    pub target: TargetConfig,
    pub labels: LabelsConfig,
    pub predictor: PredictorConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn fingerprint(&self) -> String {
        seed::sha256_hex(self.to_toml().as_bytes())
    }

    pub fn space(&self) -> Result<TransformSpace> {
        if self.transforms.space.is_empty() {
            return Ok(default_space());
        }
        let ts = self
            .transforms
            .space
            .iter()
            .map(|s| {
                Transform::from_str(s).map_err(|e| Error::Config(format!("transforms.space: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        TransformSpace::new(ts).map_err(|e| Error::Config(format!("transforms.space: {e}")))
    }

    fn stage_seed(&self, stage: u64, local: u64) -> u64 {
        seed::derive_seed(&[self.seed, stage, local])
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        self.target.train.validate().map_err(cfg)?;
        self.predictor.train.validate().map_err(cfg)?;
        self.predictor.objective.validate().map_err(cfg)?;
        let space = self.space()?;
        for p in &self.eval.policies {
            p.validate(space.len()).map_err(cfg)?;
        }
        if self.corrupt.severities.iter().any(|s| !(1..=5).contains(s)) {
            return Err(Error::Config("corrupt.severities must lie in 1..=5".into()));
        }
        if self.split.loss_train_fraction <= 0.0 || self.split.loss_train_fraction >= 1.0 {
            return Err(Error::Config(
                "split.loss_train_fraction must be in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    TrainTarget,
    GenLabels,
    TrainPredictor,
    Corrupt,
    Eval,
    Report,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::TrainTarget,
        Command::GenLabels,
        Command::TrainPredictor,
        Command::Corrupt,
        Command::Eval,
        Command::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::TrainTarget => "train-target",
            Command::GenLabels => "gen-labels",
            Command::TrainPredictor => "train-predictor",
            Command::Corrupt => "corrupt",
            Command::Eval => "eval",
            Command::Report => "report",
        }
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown command `{s}`")))
    }
}

/// Holds the per-directory lock for the duration of a command.
struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(Lock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} exists: another command is running in this directory (remove it if stale)",
                path.display()
            ))),
            Err(e) => Err(Error::storage(path, e)),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Input and output fingerprints of one command run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

fn hash_file(path: &Path) -> Result<String> {
    Ok(seed::sha256_hex(
        &fs::read(path).map_err(|e| Error::storage(path, e))?,
    ))
}

/// A configured pipeline bound to an output directory.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub out: PathBuf,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, out: PathBuf) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn require(&self, name: &str, producer: &'static str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingPrerequisite {
                artifact: p,
                producer,
            })
        }
    }

    /// `(train, test)` datasets.
    pub fn datasets(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        let d = &self.config.dataset;
        match d.source {
            DataSource::Synthetic => {
                let all = gen_synthetic(
                    d.train + d.test,
                    d.classes,
                    d.side,
                    self.config.stage_seed(1, 0),
                )?;
                let train: Vec<usize> = (0..d.train).collect();
                let test: Vec<usize> = (d.train..d.train + d.test).collect();
                Ok((all.subset(&train), all.subset(&test)))
            }
            DataSource::CifarBinary => {
                let need = |p: &Option<PathBuf>, key: &str| {
                    p.clone().ok_or_else(|| {
                        Error::Config(format!("dataset.{key} is required for cifar_binary"))
                    })
                };
                let train = load_cifar_binary(&need(&d.train_path, "train_path")?, d.classes)?;
                let test = load_cifar_binary(&need(&d.test_path, "test_path")?, d.classes)?;
                Ok((train, test))
            }
        }
    }

    /// `(loss_train, loss_valid)` folds of the training data.
    pub fn folds(&self, train: &LabeledDataset) -> Result<(LabeledDataset, LabeledDataset)> {
        let spec = SplitSpec {
            loss_train_fraction: self.config.split.loss_train_fraction,
            seed: self.config.stage_seed(2, 0),
        };
        split(train, &spec)
    }

    fn plan(&self) -> PerturbationPlan {
        let mut plan = PerturbationPlan {
            seed: self.config.stage_seed(4, 0),
            ..PerturbationPlan::default()
        };
        if let Some(n) = self.config.labels.corrupted_per_image {
            plan.corrupted_per_image = n;
        }
        if let Some(k) = &self.config.labels.kinds {
            plan.kinds = k.clone();
        }
        plan
    }

    pub fn load_target(&self) -> Result<TargetClassifier> {
        let mut t = TargetClassifier::load(&self.require(TARGET_FILE, "train-target")?)?;
        t.freeze();
        Ok(t)
    }

    pub fn load_predictor(&self) -> Result<LossPredictor> {
        LossPredictor::load(&self.require(PREDICTOR_FILE, "train-predictor")?)
    }

    /// Runs one command under the directory lock and records its manifest.
    pub fn run(&self, cmd: Command) -> Result<RunManifest> {
        fs::create_dir_all(&self.out).map_err(|e| Error::storage(&self.out, e))?;
        let _lock = Lock::acquire(&self.out)?;
        log::info!("{}: output directory {}", cmd.name(), self.out.display());
        let (inputs, outputs) = match cmd {
            Command::TrainTarget => self.train_target()?,
            Command::GenLabels => self.gen_labels()?,
            Command::TrainPredictor => self.train_predictor()?,
            Command::Corrupt => self.corrupt()?,
            Command::Eval => self.eval()?,
            Command::Report => self.report()?,
        };
        let hashes = |names: Vec<String>| -> Result<BTreeMap<String, String>> {
            names
                .into_iter()
                .map(|n| Ok((n.clone(), hash_file(&self.path(&n))?)))
                .collect()
        };
        let manifest = RunManifest {
            command: cmd.name().to_string(),
            config: self.config.fingerprint(),
            seed: self.config.seed,
            inputs: hashes(inputs)?,
            outputs: hashes(outputs)?,
        };
        let runs = self.path(RUNS_DIR);
        fs::create_dir_all(&runs).map_err(|e| Error::storage(&runs, e))?;
        let path = runs.join(format!("{}.json", cmd.name()));
        let text =
            serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| Error::storage(path, e))?;
        Ok(manifest)
    }

    /// Every command in tutorial order.
    pub fn run_all(&self) -> Result<()> {
        for cmd in Command::ALL {
            self.run(cmd)?;
        }
        Ok(())
    }

    fn train_target(&self) -> Result<(Vec<String>, Vec<String>)> {
        let (train, test) = self.datasets()?;
        let mut cfg = self.config.target.train.clone();
        cfg.seed = self.config.stage_seed(3, cfg.seed);
        let (mut model, report) = train_target(&train, &cfg, &self.config.target.arch)?;
        let acc = model.accuracy(&test)?;
        log::info!("target clean test accuracy {:.2}%", 100.0 * acc);
        model.set_metric("clean_test_accuracy", acc);
        if let Some(first) = report.epoch_losses.first() {
            model.set_metric("first_epoch_loss", *first);
        }
        model.save(&self.path(TARGET_FILE))?;
        Ok((vec![], vec![TARGET_FILE.into()]))
    }

    fn gen_labels(&self) -> Result<(Vec<String>, Vec<String>)> {
        let target = self.load_target()?;
        let (train, _) = self.datasets()?;
        let space = self.config.space()?;
        let store = generate_label_store(
            &target,
            &train,
            &space,
            &self.plan(),
            &self.path(LABELS_FILE),
            rayon::current_num_threads(),
        )?;
        log::info!("label store holds {} records", store.len());
        Ok((vec![TARGET_FILE.into()], vec![LABELS_FILE.into()]))
    }

    fn train_predictor(&self) -> Result<(Vec<String>, Vec<String>)> {
        let store = LabelStore::load(&self.require(LABELS_FILE, "gen-labels")?)?;
        if let Ok(target) = self.load_target() {
            if target.fingerprint() != store.header().target_fingerprint {
                return Err(Error::Consistency(
                    "label store was generated with a different target (rerun gen-labels)".into(),
                ));
            }
        }
        let (train, _) = self.datasets()?;
        let (loss_train, loss_valid) = self.folds(&train)?;
        let space = self.config.space()?;
        let p = &self.config.predictor;
        let mut cfg = p.train.clone();
        cfg.seed = self.config.stage_seed(5, cfg.seed);
        let (mut model, report) =
            train_predictor(&store, &loss_train, &space, &cfg, &p.objective, &p.arch)?;
        let untrained = LossPredictor::new(
            &p.arch,
            model.network().arch().in_channels,
            &space,
            cfg.seed,
        )?;
        let rho = mean_spearman(&model, &store, &loss_valid)?;
        let rho0 = mean_spearman(&untrained, &store, &loss_valid)?;
        log::info!("predictor loss-valid Spearman {rho:.4} (untrained {rho0:.4})");
        model.set_metric("spearman_loss_valid", rho);
        model.set_metric("spearman_loss_valid_untrained", rho0);
        model.set_metric("skipped_batches", report.skipped_batches as f64);
        model.save(&self.path(PREDICTOR_FILE))?;
        Ok((vec![LABELS_FILE.into()], vec![PREDICTOR_FILE.into()]))
    }

    fn corrupt(&self) -> Result<(Vec<String>, Vec<String>)> {
        let (_, test) = self.datasets()?;
        let c = &self.config.corrupt;
        let dataset_seed = self.config.stage_seed(6, 0);
        let mut specs = Vec::new();
        for &kind in &c.kinds {
            for &s in &c.severities {
                specs.push(CorruptionSpec::new(kind, s, dataset_seed)?);
            }
        }
        let dir = self.path(CORRUPTED_DIR);
        corrupt_dataset(&test, &specs, &dir, c.format)?;
        Ok((
            vec![],
            vec![format!("{CORRUPTED_DIR}/{}", dataio::MANIFEST_FILE)],
        ))
    }

    /// The clean test set followed by every corrupted set of the manifest.
    pub fn eval_sets(&self) -> Result<Vec<EvalSet>> {
        let (_, test) = self.datasets()?;
        let manifest = self.require(
            &format!("{CORRUPTED_DIR}/{}", dataio::MANIFEST_FILE),
            "corrupt",
        )?;
        let mut sets = vec![EvalSet {
            kind: None,
            severity: 0,
            data: test.clone(),
        }];
        sets.extend(load_manifest_sets(&manifest, &test)?);
        Ok(sets)
    }

    fn eval(&self) -> Result<(Vec<String>, Vec<String>)> {
        let e = &self.config.eval;
        let mut inputs = vec![
            TARGET_FILE.to_string(),
            format!("{CORRUPTED_DIR}/{}", dataio::MANIFEST_FILE),
        ];
        let predictor = if e.policies.iter().any(SelectionPolicy::uses_predictor) {
            if !self.path(PREDICTOR_FILE).exists() {
                return Err(Error::Config(format!(
                    "policies {} need {}; run train-predictor first",
                    e.policies
                        .iter()
                        .filter(|p| p.uses_predictor())
                        .map(ToString::to_string)
                        .collect::<Vec<_>>()
                        .join(", "),
                    self.path(PREDICTOR_FILE).display()
                )));
            }
            inputs.push(PREDICTOR_FILE.into());
            Some(self.load_predictor()?)
        } else {
            None
        };
        let target = self.load_target()?;
        let space = self.config.space()?;
        let sets = self.eval_sets()?;
        let options = EvalOptions {
            max_per_corrupted_cell: e.max_per_corrupted_cell,
            max_clean: e.max_clean,
            held_out_correlation: e.held_out_correlation,
        };
        let (mut reports, outcomes) = evaluate_policies(
            &target,
            predictor.as_ref(),
            &e.policies,
            &space,
            &sets,
            &options,
        )?;
        if let Some(p) = &predictor {
            let rho = p
                .metrics()
                .get("spearman_loss_valid")
                .copied()
                .filter(|v| v.is_finite());
            for r in reports.iter_mut().filter(|r| r.policy.uses_predictor()) {
                r.spearman_loss_valid = rho;
            }
        }
        let dir = self.path(EVAL_DIR);
        write_reports(&reports, &outcomes, &dir)?;
        Ok((
            inputs,
            vec![
                format!("{EVAL_DIR}/summary.json"),
                format!("{EVAL_DIR}/outcomes.tsv"),
            ],
        ))
    }

    fn report(&self) -> Result<(Vec<String>, Vec<String>)> {
        let summary = format!("{EVAL_DIR}/summary.json");
        self.require(&summary, "eval")?;
        let reports = read_reports(&self.path(EVAL_DIR))?;
        let table = comparison_table(&reports);
        fs::write(self.path(COMPARISON_FILE), &table)
            .map_err(|e| Error::storage(self.path(COMPARISON_FILE), e))?;
        print!("{table}");
        Ok((vec![summary], vec![COMPARISON_FILE.into()]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_reference_setup() {
        let cfg = PipelineConfig::from_toml("").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.dataset.train, 2000);
        assert_eq!(cfg.target.train, TrainConfig::target_default());
        assert_eq!(cfg.predictor.train, TrainConfig::default());
        assert_eq!(cfg.space().unwrap().len(), 12);
        assert!(cfg.eval.policies.len() >= 6);
    }

    #[test]
    fn config_round_trips_and_reports_fields() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let err = PipelineConfig::from_toml("[target.train]\nlearning_rat = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rat"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn missing_prerequisite_names_producer() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(PipelineConfig::default(), dir.path().to_path_buf()).unwrap();
        let err = p.run(Command::GenLabels).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("train-target"));
        // the lock is released after a failure
        assert!(!dir.path().join(LOCK_FILE).exists());
    }
}
