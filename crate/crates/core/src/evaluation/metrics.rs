//! Threshold-free ranking metrics and the best-F1 operating point.

use std::cmp::Ordering;

use serde::Serialize;

use crate::error::{invalid_input, Error, Result};

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(invalid_input!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid_input!("scores contain NaN"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "labels hold a single class ({pos} positive, {neg} negative)"
        )));
    }
    Ok((pos, neg))
}

/// Indices ordered by descending score; equal scores keep input order.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Area under the ROC curve: the probability that a random positive outranks
/// a random negative, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // Sum of mid-ranks (1-based) of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Average precision as the step-wise sum `Σ_k P(k)·ΔR(k)` over the ranking
/// by descending score. Tied scores are ranked in input order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in descending(scores).iter().enumerate() {
        if labels[i] {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / pos as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OperatingPoint {
    pub f1: f64,
    pub accuracy: f64,
    /// Scores at or above this value are called anomalous.
    pub threshold: f64,
}

/// Scans every distinct score as a threshold and keeps the best F1. Among
/// equal F1 values the highest threshold wins.
pub fn f1_accuracy(scores: &[f64], labels: &[bool]) -> Result<OperatingPoint> {
    let (pos, _) = check(scores, labels)?;
    let order = descending(scores);
    let n = scores.len();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best: Option<OperatingPoint> = None;
    let mut k = 0;
    while k < n {
        let t = scores[order[k]];
        while k < n && scores[order[k]] == t {
            if labels[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let fn_ = pos - tp;
        let tn = n - pos - fp;
        let f1 = 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
        if best.is_none_or(|b| f1 > b.f1) {
            best = Some(OperatingPoint {
                f1,
                accuracy: (tp + tn) as f64 / n as f64,
                threshold: t,
            });
        }
    }
    Ok(best.expect("at least one score"))
}
