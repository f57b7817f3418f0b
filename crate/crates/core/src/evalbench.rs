//! Error tables, corruption error, cost accounting, per-image outcomes, and
//! report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corruptions::{corruption_sets, CorruptionKind};
use crate::dataio::EvalSet;
use crate::error::{Error, Result};
use crate::imgcore::TransformSpace;
use crate::nets::{LossPredictor, TargetClassifier};
use crate::ranking::{exact_spearman, nan_mean};
use crate::seed;
use crate::ttapolicy::{predict_cached, SelectionPolicy, ViewCache};

/// Mean of the five severity errors of one corruption.
pub fn corruption_error(errors: &[f64]) -> Result<f64> {
    if errors.len() != 5 {
        return Err(Error::dim(format!(
            "corruption error needs 5 severities, got {}",
            errors.len()
        )));
    }
    if errors.iter().any(|e| !(0.0..=100.0).contains(e)) {
        return Err(Error::param("error rates must lie in [0, 100]"));
    }
    Ok(errors.iter().sum::<f64>() / 5.0)
}

/// Unnormalized mean corruption error.
pub fn mce(ce_values: &[f64]) -> Result<f64> {
    if ce_values.is_empty() {
        return Err(Error::param("mCE of no corruptions"));
    }
    Ok(ce_values.iter().sum::<f64>() / ce_values.len() as f64)
}

/// Compute of `policy` per image in units of one plain target forward pass.
pub fn relative_cost(policy: &SelectionPolicy, target_macs: u64, predictor_macs: u64) -> f64 {
    let extra = if policy.uses_predictor() {
        predictor_macs as f64
    } else {
        0.0
    };
    (policy.inference_count() as f64 * target_macs as f64 + extra) / target_macs as f64
}

/// Name of an evaluation cell: `clean` or `<kind>:<severity>`.
pub fn cell_name(kind: Option<CorruptionKind>, severity: u8) -> String {
    match kind {
        None => "clean".to_string(),
        Some(k) => format!("{k}:{severity}"),
    }
}

/// Correct predictions out of a count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub correct: u64,
    pub count: u64,
}

impl Cell {
    /// Top-1 error percentage.
    pub fn error(&self) -> f64 {
        100.0 * (1.0 - self.correct as f64 / self.count as f64)
    }
}

/// Top-1 error per corruption and severity, plus the clean set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorTable {
    pub clean: Option<Cell>,
    /// Keyed by corruption name, then indexed by severity − 1.
    pub cells: BTreeMap<String, [Option<Cell>; 5]>,
}

impl ErrorTable {
    pub fn record(&mut self, kind: Option<CorruptionKind>, severity: u8, correct: bool) {
        let cell = match kind {
            None => self.clean.get_or_insert_with(Cell::default),
            Some(k) => self.cells.entry(k.name().to_string()).or_default()
                [usize::from(severity) - 1]
                .get_or_insert_with(Cell::default),
        };
        cell.count += 1;
        cell.correct += u64::from(correct);
    }

    pub fn clean_error(&self) -> Option<f64> {
        self.clean.map(|c| c.error())
    }

    /// Errors of all five severities, if every one was evaluated.
    pub fn severity_errors(&self, kind: CorruptionKind) -> Option<Vec<f64>> {
        self.cells
            .get(kind.name())?
            .iter()
            .map(|c| c.map(|c| c.error()))
            .collect()
    }

    /// Mean top-1 error over every evaluated image of the given kinds.
    pub fn pooled_error(&self, kinds: &[CorruptionKind]) -> Option<f64> {
        let mut total = Cell::default();
        for k in kinds {
            for c in self.cells.get(k.name()).into_iter().flatten().flatten() {
                total.correct += c.correct;
                total.count += c.count;
            }
        }
        (total.count > 0).then(|| total.error())
    }
}

/// Everything measured for one policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub policy: SelectionPolicy,
    pub inference_count: usize,
    pub relative_cost: f64,
    pub clean_error: Option<f64>,
    /// Corruption error per kind with all five severities evaluated.
    pub corruption_errors: BTreeMap<String, f64>,
    pub mce_training: Option<f64>,
    pub mce_held_out: Option<f64>,
    pub spearman_loss_valid: Option<f64>,
    pub spearman_held_out: Option<f64>,
    pub table: ErrorTable,
    /// Per cell, how often each space index was chosen (selector policies).
    pub selection_counts: BTreeMap<String, Vec<u64>>,
    pub transform_names: Vec<String>,
}

impl MetricsReport {
    fn from_outcomes(
        policy: SelectionPolicy,
        outcomes: &[&Outcome],
        space: &TransformSpace,
        target_macs: u64,
        predictor_macs: u64,
    ) -> Result<Self> {
        let mut table = ErrorTable::default();
        let mut selection_counts: BTreeMap<String, Vec<u64>> = BTreeMap::new();
        for o in outcomes {
            table.record(o.kind, o.severity, o.correct);
            if policy.is_selector() {
                let row = selection_counts
                    .entry(cell_name(o.kind, o.severity))
                    .or_insert_with(|| vec![0; space.len()]);
                for &c in &o.chosen {
                    row[c] += 1;
                }
            }
        }
        let mut corruption_errors = BTreeMap::new();
        for kind in CorruptionKind::ALL {
            if let Some(errs) = table.severity_errors(kind) {
                corruption_errors.insert(kind.name().to_string(), corruption_error(&errs)?);
            }
        }
        let (training, held_out) = corruption_sets();
        let group = |kinds: &[CorruptionKind]| {
            let ces: Vec<f64> = kinds
                .iter()
                .filter_map(|k| corruption_errors.get(k.name()).copied())
                .collect();
            mce(&ces).ok()
        };
        Ok(Self {
            policy,
            inference_count: policy.inference_count(),
            relative_cost: relative_cost(&policy, target_macs, predictor_macs),
            clean_error: table.clean_error(),
            mce_training: group(&training),
            mce_held_out: group(&held_out),
            corruption_errors,
            spearman_loss_valid: None,
            spearman_held_out: None,
            table,
            selection_counts,
            transform_names: space.names(),
        })
    }

    /// Selection fractions per cell; each row sums to 1.
    pub fn selection_fractions(&self) -> BTreeMap<String, Vec<f64>> {
        self.selection_counts
            .iter()
            .map(|(cell, counts)| {
                let total: u64 = counts.iter().sum();
                (
                    cell.clone(),
                    counts.iter().map(|&c| c as f64 / total as f64).collect(),
                )
            })
            .collect()
    }
}

/// One policy's result on one image of one cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub policy: SelectionPolicy,
    pub kind: Option<CorruptionKind>,
    pub severity: u8,
    pub id: u64,
    pub chosen: Vec<usize>,
    pub predicted: usize,
    pub label: usize,
    pub correct: bool,
}

impl Outcome {
    pub fn to_line(&self) -> String {
        let chosen: Vec<String> = self.chosen.iter().map(ToString::to_string).collect();
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.policy,
            cell_name(self.kind, self.severity),
            self.id,
            chosen.join(","),
            self.predicted,
            self.label,
            u8::from(self.correct)
        )
    }
}

/// Evaluation limits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Evaluate only the first `n` images of each corrupted cell.
    pub max_per_corrupted_cell: Option<usize>,
    /// Evaluate only the first `n` clean images.
    pub max_clean: Option<usize>,
    /// Also correlate predictor scores with true losses on the held-out
    /// corruption cells (costs a forward pass per transform).
    pub held_out_correlation: bool,
}

fn image_key(kind: Option<CorruptionKind>, severity: u8, id: u64) -> u64 {
    seed::derive_seed(&[id, kind.map_or(0, |k| k.index() + 1), u64::from(severity)])
}

/// Evaluates every policy on every set. Forward passes are shared between
/// policies through a per-image cache. Returns one report per policy (in
/// input order) and the per-image outcomes.
pub fn evaluate_policies(
    target: &TargetClassifier,
    predictor: Option<&LossPredictor>,
    policies: &[SelectionPolicy],
    space: &TransformSpace,
    sets: &[EvalSet],
    options: &EvalOptions,
) -> Result<(Vec<MetricsReport>, Vec<Outcome>)> {
    for p in policies {
        p.validate(space.len())?;
        if p.uses_predictor() {
            let Some(pred) = predictor else {
                return Err(Error::Config(format!(
                    "policy {p} needs a loss predictor checkpoint (run train-predictor first)"
                )));
            };
            pred.check_space(space)?;
        }
    }
    let held_out = corruption_sets().1;
    let mut items = Vec::new();
    for (s, set) in sets.iter().enumerate() {
        let limit = if set.kind.is_some() {
            options.max_per_corrupted_cell
        } else {
            options.max_clean
        };
        let n = limit.map_or(set.data.len(), |l| l.min(set.data.len()));
        items.extend((0..n).map(|i| (s, i)));
    }
    let per_image = items
        .par_iter()
        .map(|&(s, i)| {
            let set = &sets[s];
            let img = &set.data.images()[i];
            let label = set.data.labels()[i];
            let id = set.data.ids()[i];
            let key = image_key(set.kind, set.severity, id);
            let mut cache = ViewCache::new(target, space, img);
            let rho = match (predictor, set.kind) {
                (Some(pred), Some(kind))
                    if options.held_out_correlation && held_out.contains(&kind) =>
                {
                    let losses = cache.losses(label)?;
                    Some(exact_spearman(&cache.scores(pred)?, &losses)?)
                }
                _ => None,
            };
            let outcomes = policies
                .iter()
                .map(|p| {
                    let pred = predict_cached(p, &mut cache, predictor, Some(label), key)?;
                    let predicted = pred.predicted_class();
                    Ok(Outcome {
                        policy: *p,
                        kind: set.kind,
                        severity: set.severity,
                        id,
                        chosen: pred.chosen,
                        predicted,
                        label,
                        correct: predicted == label,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((outcomes, rho))
        })
        .collect::<Result<Vec<_>>>()?;
    let rho_held_out = nan_mean(per_image.iter().filter_map(|(_, r)| *r));
    let outcomes: Vec<Outcome> = per_image.into_iter().flat_map(|(o, _)| o).collect();
    let predictor_macs = predictor.map_or(0, LossPredictor::macs);
    let reports = policies
        .iter()
        .map(|p| {
            let mine: Vec<&Outcome> = outcomes.iter().filter(|o| o.policy == *p).collect();
            let mut r =
                MetricsReport::from_outcomes(*p, &mine, space, target.macs(), predictor_macs)?;
            if p.uses_predictor() && options.held_out_correlation {
                r.spearman_held_out = Some(rho_held_out).filter(|v| v.is_finite());
            }
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((reports, outcomes))
}

/// Single-policy form of [`evaluate_policies`].
pub fn evaluate_policy(
    target: &TargetClassifier,
    predictor: Option<&LossPredictor>,
    policy: &SelectionPolicy,
    space: &TransformSpace,
    sets: &[EvalSet],
    options: &EvalOptions,
) -> Result<MetricsReport> {
    let (mut reports, _) = evaluate_policies(target, predictor, &[*policy], space, sets, options)?;
    Ok(reports.remove(0))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt4(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.4}"))
}

fn split_cell(cell: &str) -> (&str, &str) {
    cell.split_once(':').unwrap_or((cell, "0"))
}

/// Selection-rate CSV: one row per cell (clean first), one column per
/// transform.
pub fn selection_rate_csv(report: &MetricsReport) -> Result<String> {
    if report.selection_counts.is_empty() {
        return Err(Error::param(format!(
            "policy {} recorded no selections",
            report.policy
        )));
    }
    let mut out = String::from("corruption,severity");
    for name in &report.transform_names {
        out.push(',');
        out.push_str(&csv_field(name));
    }
    out.push('\n');
    let fractions = report.selection_fractions();
    let rows = fractions
        .get_key_value("clean")
        .into_iter()
        .chain(fractions.iter().filter(|(k, _)| *k != "clean"));
    for (cell, row) in rows {
        let (kind, sev) = split_cell(cell);
        write!(out, "{kind},{sev}").expect("string write");
        for v in row {
            write!(out, ",{v:.4}").expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn selection_rate_report(report: &MetricsReport, out: &Path) -> Result<()> {
    fs::write(out, selection_rate_csv(report)?).map_err(|e| Error::storage(out, e))
}

/// Error table CSV for several policies: one row per policy and cell.
pub fn error_table_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("policy,corruption,severity,error,count\n");
    for r in reports {
        let p = csv_field(&r.policy.to_string());
        if let Some(c) = r.table.clean {
            writeln!(out, "{p},clean,0,{:.4},{}", c.error(), c.count).expect("string write");
        }
        for (kind, row) in &r.table.cells {
            for (s, c) in row.iter().enumerate() {
                if let Some(c) = c {
                    writeln!(out, "{p},{kind},{},{:.4},{}", s + 1, c.error(), c.count)
                        .expect("string write");
                }
            }
        }
    }
    out
}

/// One row per policy with cost and the headline errors.
pub fn comparison_table(reports: &[MetricsReport]) -> String {
    let (training, held_out) = corruption_sets();
    let mut out = String::from(
        "policy,relative_cost,clean_error,corrupted_error_training,corrupted_error_held_out,mce_training,mce_held_out\n",
    );
    for r in reports {
        writeln!(
            out,
            "{},{:.4},{},{},{},{},{}",
            csv_field(&r.policy.to_string()),
            r.relative_cost,
            opt4(r.clean_error),
            opt4(r.table.pooled_error(&training)),
            opt4(r.table.pooled_error(&held_out)),
            opt4(r.mce_training),
            opt4(r.mce_held_out)
        )
        .expect("string write");
    }
    out
}

/// Writes `summary.json`, `errors.csv`, `outcomes.tsv`, and one
/// `selection_<policy>.csv` per selector policy into `dir`.
pub fn write_reports(reports: &[MetricsReport], outcomes: &[Outcome], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    let put = |name: &str, text: String| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::storage(path, e))
    };
    let json = serde_json::to_string_pretty(reports).map_err(|e| Error::Format(e.to_string()))?;
    put("summary.json", json + "\n")?;
    put("errors.csv", error_table_csv(reports))?;
    let mut lines = String::from("policy\tcell\tid\tchosen\tpredicted\tlabel\tcorrect\n");
    for o in outcomes {
        lines.push_str(&o.to_line());
        lines.push('\n');
    }
    put("outcomes.tsv", lines)?;
    for r in reports.iter().filter(|r| !r.selection_counts.is_empty()) {
        let name = r.policy.to_string().replace([':', '+'], "_");
        put(&format!("selection_{name}.csv"), selection_rate_csv(r)?)?;
    }
    Ok(())
}

pub fn read_reports(dir: &Path) -> Result<Vec<MetricsReport>> {
    let path = dir.join("summary.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::storage(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ce_and_mce_examples() {
        assert_eq!(
            corruption_error(&[10.0, 20.0, 30.0, 40.0, 50.0]).unwrap(),
            30.0
        );
        assert_eq!(corruption_error(&[0.0; 5]).unwrap(), 0.0);
        assert!(matches!(
            corruption_error(&[1.0; 4]),
            Err(Error::Dimension(_))
        ));
        assert_eq!(mce(&[30.0, 50.0]).unwrap(), 40.0);
        assert_eq!(mce(&[7.5]).unwrap(), 7.5);
        assert!(mce(&[]).is_err());
    }

    #[test]
    fn cost_examples() {
        let t = 1_000_000;
        assert_eq!(relative_cost(&SelectionPolicy::Identity, t, 10_000), 1.0);
        assert_eq!(relative_cost(&SelectionPolicy::FiveCrop, t, 10_000), 5.0);
        let ours = SelectionPolicy::OursK {
            k: 1,
            compose_flip: false,
        };
        assert!((relative_cost(&ours, t, 10_000) - 1.01).abs() < 1e-12);
        let ours2 = SelectionPolicy::OursK {
            k: 2,
            compose_flip: true,
        };
        assert!((relative_cost(&ours2, t, 20_000) - 4.02).abs() < 1e-12);
    }

    #[test]
    fn table_records_exact_ratios() {
        let mut t = ErrorTable::default();
        for i in 0..8 {
            t.record(Some(CorruptionKind::Contrast), 2, i % 4 != 0);
        }
        t.record(None, 0, true);
        let c = t.cells["contrast"][1].unwrap();
        assert_eq!((c.correct, c.count), (6, 8));
        assert_eq!(c.error(), 25.0);
        assert_eq!(t.clean_error(), Some(0.0));
        assert!(t.severity_errors(CorruptionKind::Contrast).is_none());
    }
}
