//! AUC, ROC curves, percentile-bootstrap intervals and result tables.

use std::fmt::Write as _;

use crate::error::{MilError, Result};
use crate::rng::{Purpose, RngStream, StreamId};

/// Scores for the positive class with their binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub bag_ids: Vec<String>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>, bag_ids: Vec<String>) -> Result<Self> {
        if scores.len() != labels.len() || scores.len() != bag_ids.len() {
            return Err(MilError::InvalidValue("scored set columns differ in length".into()));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(MilError::InvalidLabel("labels must be 0 or 1".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(MilError::InvalidValue("non-finite score".into()));
        }
        Ok(ScoredSet {
            scores,
            labels,
            bag_ids,
        })
    }

    /// Convenience constructor with generated ids.
    pub fn from_pairs(scores: &[f64], labels: &[u8]) -> Result<Self> {
        let ids = (0..scores.len()).map(|i| i.to_string()).collect();
        ScoredSet::new(scores.to_vec(), labels.to_vec(), ids)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn class_counts(&self) -> (u64, u64) {
        let pos = self.labels.iter().filter(|&&l| l == 1).count() as u64;
        (pos, self.len() as u64 - pos)
    }

    fn require_both_classes(&self) -> Result<(u64, u64)> {
        let (pos, neg) = self.class_counts();
        if pos == 0 || neg == 0 {
            return Err(MilError::DegenerateInput(format!(
                "AUC needs both classes, got {pos} positive and {neg} negative"
            )));
        }
        Ok((pos, neg))
    }
}

/// Indices sorted by ascending score.
fn ascending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    order
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
///
/// Computed from mid-ranks in exact integer arithmetic (ranks are doubled so
/// tied mid-ranks stay integral); the only rounding is the final division.
pub fn auc(set: &ScoredSet) -> Result<f64> {
    let (pos, neg) = set.require_both_classes()?;
    let order = ascending(&set.scores);
    let mut doubled_rank_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && set.scores[order[end]] == set.scores[order[start]] {
            end += 1;
        }
        // Ranks start+1 ..= end share the mid-rank (start + 1 + end) / 2.
        let doubled_mid = (start + 1 + end) as u64;
        let positives = order[start..end].iter().filter(|&&i| set.labels[i] == 1).count() as u64;
        doubled_rank_sum += doubled_mid * positives;
        start = end;
    }
    let doubled_u = doubled_rank_sum - pos * (pos + 1);
    Ok(doubled_u as f64 / (2 * pos * neg) as f64)
}

/// ROC curve with one point per distinct threshold, from (0,0) to (1,1).
pub fn roc_points(set: &ScoredSet) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = set.require_both_classes()?;
    let mut order = ascending(&set.scores);
    order.reverse();
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && set.scores[order[end]] == set.scores[order[start]] {
            end += 1;
        }
        for &i in &order[start..end] {
            if set.labels[i] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        start = end;
    }
    Ok(points)
}

pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            resamples: 2000,
            level: 0.95,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapInterval {
    pub lo: f64,
    pub hi: f64,
    /// Resamples discarded because they held a single class.
    pub redraws: usize,
}

/// Redraw budget: total attempts may not exceed this multiple of `resamples`.
pub const BOOTSTRAP_ATTEMPT_FACTOR: usize = 100;

/// Nearest-rank quantile of sorted data: the value at rank `⌈q·n⌉`.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    sorted[rank - 1]
}

/// Percentile bootstrap interval of the AUC, resampling bags with
/// replacement. Attempt `i` draws from its own stream, so the result
/// depends only on the seed.
pub fn bootstrap_ci(set: &ScoredSet, cfg: &BootstrapConfig) -> Result<BootstrapInterval> {
    if cfg.resamples == 0 || !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(MilError::InvalidConfig(format!(
            "bootstrap needs resamples ≥ 1 and level in (0, 1), got {} and {}",
            cfg.resamples, cfg.level
        )));
    }
    set.require_both_classes()?;
    let n = set.len();
    let max_attempts = BOOTSTRAP_ATTEMPT_FACTOR * cfg.resamples;
    let mut aucs = Vec::with_capacity(cfg.resamples);
    let mut attempts = 0usize;
    let mut scores = vec![0.0; n];
    let mut labels = vec![0u8; n];
    while aucs.len() < cfg.resamples {
        if attempts == max_attempts {
            return Err(MilError::DegenerateInput(format!(
                "{attempts} bootstrap attempts yielded only {} two-class resamples",
                aucs.len()
            )));
        }
        let mut rng = RngStream::new(cfg.seed, StreamId::new(Purpose::Bootstrap).item(attempts as u64));
        attempts += 1;
        for k in 0..n {
            let i = rng.below(n);
            scores[k] = set.scores[i];
            labels[k] = set.labels[i];
        }
        let pos = labels.iter().filter(|&&l| l == 1).count();
        if pos == 0 || pos == n {
            continue;
        }
        let resample = ScoredSet {
            scores: scores.clone(),
            labels: labels.clone(),
            bag_ids: Vec::new(),
        };
        aucs.push(auc(&resample)?);
    }
    aucs.sort_by(f64::total_cmp);
    let tail = (1.0 - cfg.level) / 2.0;
    Ok(BootstrapInterval {
        lo: nearest_rank(&aucs, tail),
        hi: nearest_rank(&aucs, 1.0 - tail),
        redraws: attempts - cfg.resamples,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.4} ± {std:.4}")
}

pub fn format_auc_ci(auc: f64, lo: f64, hi: f64) -> String {
    format!("{auc:.3} ({lo:.3} - {hi:.3})")
}

/// One line of a result table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub auc: f64,
    /// Spread over folds; `None` for a single split.
    pub std: Option<f64>,
    pub ci: Option<(f64, f64)>,
}

impl ResultRow {
    pub fn from_folds(method: impl Into<String>, fold_aucs: &[f64]) -> Self {
        let (mean, std) = mean_std(fold_aucs);
        ResultRow {
            method: method.into(),
            auc: mean,
            std: (fold_aucs.len() > 1).then_some(std),
            ci: None,
        }
    }

    pub fn formatted(&self) -> String {
        match (self.std, self.ci) {
            (Some(std), _) => format_mean_std(self.auc, std),
            (None, Some((lo, hi))) => format_auc_ci(self.auc, lo, hi),
            (None, None) => format!("{:.4}", self.auc),
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Full-precision CSV and an aligned text table.
pub fn report_table(rows: &[ResultRow]) -> Result<(String, String)> {
    if rows.is_empty() {
        return Err(MilError::InvalidValue("no result rows".into()));
    }
    let mut csv = String::from("method,auc,std,ci_lo,ci_hi\n");
    for r in rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            r.method,
            r.auc,
            opt(r.std),
            opt(r.ci.map(|c| c.0)),
            opt(r.ci.map(|c| c.1))
        );
    }
    let width = rows.iter().map(|r| r.method.chars().count()).max().unwrap_or(0).max(6);
    let mut text = format!("{:<width$}  AUC\n", "Method");
    for r in rows {
        let _ = writeln!(text, "{:<width$}  {}", r.method, r.formatted());
    }
    Ok((csv, text))
}

/// Parses `bag_id,score,label` rows (header required).
pub fn parse_predictions_csv(text: &str) -> Result<ScoredSet> {
    let mut lines = text.lines();
    match lines.next().map(str::trim) {
        Some("bag_id,score,label") => {}
        other => {
            return Err(MilError::Format(format!(
                "expected header bag_id,score,label, got {other:?}"
            )))
        }
    }
    let (mut ids, mut scores, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [id, score, label] = fields[..] else {
            return Err(MilError::Format(format!("line {}: expected 3 fields", n + 2)));
        };
        let score: f64 = score
            .parse()
            .map_err(|_| MilError::Format(format!("line {}: bad score {score:?}", n + 2)))?;
        let label: u8 = match label {
            "0" => 0,
            "1" => 1,
            other => return Err(MilError::Format(format!("line {}: bad label {other:?}", n + 2))),
        };
        ids.push(id.to_string());
        scores.push(score);
        labels.push(label);
    }
    ScoredSet::new(scores, labels, ids)
}

pub fn predictions_csv(set: &ScoredSet) -> String {
    let mut out = String::from("bag_id,score,label\n");
    for ((id, s), l) in set.bag_ids.iter().zip(&set.scores).zip(&set.labels) {
        let _ = writeln!(out, "{id},{s},{l}");
    }
    out
}

pub fn roc_csv(points: &[(f64, f64)]) -> String {
    let mut out = String::from("fpr,tpr\n");
    for (x, y) in points {
        let _ = writeln!(out, "{x},{y}");
    }
    out
}
