//! Rank-correlation evaluation and differentiable ranking objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    SoftSpearman,
    PairwiseMargin,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankingObjectiveConfig {
    pub kind: ObjectiveKind,
    pub temperature: f64,
    pub margin: f64,
}

impl Default for RankingObjectiveConfig {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::SoftSpearman,
            temperature: 0.1,
            margin: 0.01,
        }
    }
}

impl RankingObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ObjectiveKind::SoftSpearman
                if !(self.temperature > 0.0 && self.temperature.is_finite()) =>
            {
                Err(Error::param(format!(
                    "temperature {} must be positive",
                    self.temperature
                )))
            }
            ObjectiveKind::PairwiseMargin if !(self.margin >= 0.0 && self.margin.is_finite()) => {
                Err(Error::param(format!("margin {} must be >= 0", self.margin)))
            }
            _ => Ok(()),
        }
    }

    /// Loss and gradient w.r.t. `pred` for the configured objective.
    pub fn loss(&self, pred: &[f64], truth: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self.kind {
            ObjectiveKind::SoftSpearman => soft_spearman_loss(pred, truth, self.temperature),
            ObjectiveKind::PairwiseMargin => pairwise_margin_loss(pred, truth, self.margin),
        }
    }
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::dim("ranking needs at least two entries"));
    }
    Ok(())
}

/// 1-based ranks, ties sharing the average of the ranks they span.
pub fn fractional_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn centered(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ac, bc) = (centered(a), centered(b));
    let va = ac.iter().map(|x| x * x).sum::<f64>();
    let vb = bc.iter().map(|x| x * x).sum::<f64>();
    if va == 0.0 || vb == 0.0 {
        return f64::NAN;
    }
    // One square root of the product: exact for rank vectors, whose sums of
    // squares are small multiples of 1/4.
    let r = ac.iter().zip(&bc).map(|(x, y)| x * y).sum::<f64>() / (va * vb).sqrt();
    r.clamp(-1.0, 1.0)
}

/// Spearman correlation (Pearson correlation of fractional ranks). Returns
/// NaN when either rank vector is constant.
pub fn exact_spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths(a, b)?;
    Ok(pearson(&fractional_ranks(a), &fractional_ranks(b)))
}

/// Mean of the finite values, or NaN when there are none.
pub fn nan_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .filter(|v| v.is_finite())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stabilizer inside the prediction-side norm; keeps the loss finite and
/// differentiable when all predictions coincide.
const NORM_EPS: f64 = 1e-12;

/// `1 - pearson(soft_ranks(pred), ranks(truth))` with
/// `soft_rank_i = 1 + Σ_{j≠i} sigmoid((pred_i - pred_j) / temperature)`.
/// Returns the loss (in `[0, 2]`) and its gradient w.r.t. `pred`.
pub fn soft_spearman_loss(
    pred: &[f64],
    truth: &[f64],
    temperature: f64,
) -> Result<(f64, Vec<f64>)> {
    check_lengths(pred, truth)?;
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::param(format!(
            "temperature {temperature} must be positive"
        )));
    }
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite prediction".into()));
    }
    let n = pred.len();
    let target = centered(&fractional_ranks(truth));
    let t_norm = target.iter().map(|x| x * x).sum::<f64>().sqrt();
    if t_norm == 0.0 {
        return Err(Error::Degenerate(
            "constant ground truth has no ranking".into(),
        ));
    }

    // pairwise sigmoids and their derivatives (symmetric in i, j)
    let mut soft = vec![1.0; n];
    let mut dsig = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s = sigmoid((pred[i] - pred[j]) / temperature);
            soft[i] += s;
            soft[j] += 1.0 - s;
            let d = s * (1.0 - s);
            dsig[i * n + j] = d;
            dsig[j * n + i] = d;
        }
    }
    let x = centered(&soft);
    let x_norm = (x.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
    let rho = x.iter().zip(&target).map(|(a, b)| a * b).sum::<f64>() / (x_norm * t_norm);
    let loss = 1.0 - rho;

    // d(loss)/d(soft_i)
    let g: Vec<f64> = x
        .iter()
        .zip(&target)
        .map(|(&xi, &ti)| -(ti / (x_norm * t_norm) - rho * xi / (x_norm * x_norm)))
        .collect();
    let grad = (0..n)
        .map(|k| {
            (0..n)
                .filter(|&j| j != k)
                .map(|j| dsig[k * n + j] * (g[k] - g[j]))
                .sum::<f64>()
                / temperature
        })
        .collect();
    Ok((loss, grad))
}

/// Mean over pairs `(i, j)` with `truth_i < truth_j` of
/// `max(0, margin - (pred_j - pred_i))`, with its gradient w.r.t. `pred`.
/// Zero (with zero gradient) when `truth` has no ordered pair.
pub fn pairwise_margin_loss(pred: &[f64], truth: &[f64], margin: f64) -> Result<(f64, Vec<f64>)> {
    check_lengths(pred, truth)?;
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::param(format!("margin {margin} must be >= 0")));
    }
    let n = pred.len();
    let mut grad = vec![0.0; n];
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in 0..n {
            if truth[i] < truth[j] {
                pairs += 1;
                let h = margin - (pred[j] - pred[i]);
                if h > 0.0 {
                    total += h;
                    grad[i] += 1.0;
                    grad[j] -= 1.0;
                }
            }
        }
    }
    if pairs == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / pairs as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((total * scale, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_reference_values() {
        let v = [0.3, 1.2, -0.4, 2.0];
        let rev: Vec<f64> = v.iter().map(|x| -x).collect();
        assert_eq!(exact_spearman(&v, &v).unwrap(), 1.0);
        assert_eq!(exact_spearman(&v, &rev).unwrap(), -1.0);
        let r = exact_spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 4.0, 3.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12, "{r}");
    }

    #[test]
    fn spearman_degenerate_and_errors() {
        assert!(exact_spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0])
            .unwrap()
            .is_nan());
        assert!(matches!(
            exact_spearman(&[1.0, 2.0], &[1.0]),
            Err(Error::Dimension(_))
        ));
        assert!(exact_spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(
            fractional_ranks(&[3.0, 1.0, 3.0, 2.0]),
            vec![3.5, 1.0, 3.5, 2.0]
        );
    }

    #[test]
    fn soft_spearman_limits() {
        let truth = [0.1, 0.5, 0.2, 0.9, 0.4];
        let (same, _) = soft_spearman_loss(&truth, &truth, 1e-4).unwrap();
        assert!(same.abs() < 1e-9);
        let rev: Vec<f64> = truth.iter().map(|x| -x).collect();
        let (opp, _) = soft_spearman_loss(&rev, &truth, 1e-4).unwrap();
        assert!((opp - 2.0).abs() < 1e-9);
        assert!(matches!(
            soft_spearman_loss(&truth, &[1.0; 5], 0.1),
            Err(Error::Degenerate(_))
        ));
        let (flat, _) = soft_spearman_loss(&[0.0; 5], &truth, 0.1).unwrap();
        assert!((flat - 1.0).abs() < 1e-9);
    }

    #[test]
    fn margin_reference_values() {
        let truth = [0.0, 1.0, 2.0];
        let (l, g) = pairwise_margin_loss(&[0.0, 2.0, 4.0], &truth, 1.0).unwrap();
        assert_eq!((l, g), (0.0, vec![0.0; 3]));
        let (l, _) = pairwise_margin_loss(&[0.5; 3], &truth, 1.0).unwrap();
        assert_eq!(l, 1.0);
        let (l, g) = pairwise_margin_loss(&[1.0, 0.0], &[0.0, 1.0], 0.0).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(g, vec![1.0, -1.0]);
        assert!(matches!(
            pairwise_margin_loss(&[1.0, 0.0], &[0.0, 1.0], -1.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn nan_mean_skips_nan() {
        assert_eq!(nan_mean([1.0, f64::NAN, 3.0]), 2.0);
        assert!(nan_mean([f64::NAN]).is_nan());
    }
}
