//! Evaluation metrics and the parallel scaling summary.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{invalid, Result};

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return invalid(format!("rmse needs equal nonempty inputs, got {} and {}", pred.len(), truth.len()));
    }
    let ss: f64 = pred.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

pub fn mean_abs_error(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return invalid(format!("mean absolute error needs equal nonempty inputs, got {} and {}", pred.len(), truth.len()));
    }
    Ok(pred.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

fn check_labels(scores: &[f64], labels: &[f64]) -> Result<()> {
    if scores.len() != labels.len() {
        return invalid(format!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if let Some(i) = labels.iter().position(|&l| l != 0.0 && l != 1.0) {
        return invalid(format!("label {} at position {i} is not 0 or 1", labels[i]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return invalid("scores contain NaN");
    }
    Ok(())
}

/// Area under the ROC curve as the Mann-Whitney statistic: the probability
/// that a random positive outscores a random negative, ties counting one
/// half. Runs in O(n log n) via midranks.
pub fn compute_auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_labels(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1.0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return invalid("AUC needs both classes present");
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k] == 1.0).count() as f64 * mid;
        i = j + 1;
    }
    let (pos, neg) = (pos as f64, neg as f64);
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

/// 2x2 counts at a fixed threshold; a score at the threshold is called
/// positive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub true_positive: u64,
    pub false_positive: u64,
    pub true_negative: u64,
    pub false_negative: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.true_positive + self.false_positive + self.true_negative + self.false_negative
    }

    pub fn accuracy(&self) -> f64 {
        (self.true_positive + self.true_negative) as f64 / self.total().max(1) as f64
    }
}

pub const CONFUSION_THRESHOLD: f64 = 0.5;

pub fn confusion_matrix(scores: &[f64], labels: &[f64]) -> Result<Confusion> {
    check_labels(scores, labels)?;
    let mut c = Confusion::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= CONFUSION_THRESHOLD, l == 1.0) {
            (true, true) => c.true_positive += 1,
            (true, false) => c.false_positive += 1,
            (false, false) => c.true_negative += 1,
            (false, true) => c.false_negative += 1,
        }
    }
    Ok(c)
}

/// Scaling summary from wall times keyed by worker count.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Scaling {
    /// `T_1 / T_k`, present when a single-worker time exists.
    pub speedup: BTreeMap<usize, f64>,
    /// `T_1 / (k T_k)`, present when a single-worker time exists.
    pub efficiency: BTreeMap<usize, f64>,
    /// `2 T_2 / (k T_k)`, relative to the two-worker run; present when a
    /// two-worker time exists.
    pub efficiency_vs_two: BTreeMap<usize, f64>,
}

/// Speedup and efficiency. A missing baseline leaves the corresponding maps
/// empty rather than failing.
pub fn compute_speedup_efficiency(timings: &BTreeMap<usize, f64>) -> Scaling {
    let mut out = Scaling::default();
    if let Some(&t1) = timings.get(&1) {
        for (&k, &t) in timings {
            out.speedup.insert(k, t1 / t);
            out.efficiency.insert(k, t1 / (k as f64 * t));
        }
    }
    if let Some(&t2) = timings.get(&2) {
        for (&k, &t) in timings.iter().filter(|(&k, _)| k >= 2) {
            out.efficiency_vs_two.insert(k, 2.0 * t2 / (k as f64 * t));
        }
    }
    out
}

/// Speedup of `parallel` over `serial` wall time.
pub fn speedup(serial: f64, parallel: f64) -> f64 {
    serial / parallel
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub rmse: Option<f64>,
    pub auc: Option<f64>,
    pub confusion: Option<Confusion>,
    /// Wall time of the sampling loop, by worker count.
    pub wall_time_seconds: BTreeMap<usize, f64>,
    pub speedup: BTreeMap<usize, f64>,
    pub efficiency: BTreeMap<usize, f64>,
    pub efficiency_vs_two: BTreeMap<usize, f64>,
}

impl MetricsReport {
    pub fn with_timings(mut self, timings: BTreeMap<usize, f64>) -> Self {
        let s = compute_speedup_efficiency(&timings);
        self.wall_time_seconds = timings;
        self.speedup = s.speedup;
        self.efficiency = s.efficiency;
        self.efficiency_vs_two = s.efficiency_vs_two;
        self
    }
}
