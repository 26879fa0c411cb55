//! Prediction quality metrics: RMSE and MAE on the regression side, AUC
//! and accuracy on the classification side.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub mae: f64,
    /// Absent when only one class is present.
    pub auc: Option<f64>,
    pub acc: f64,
    pub n: usize,
    pub label: String,
}

/// Compute all four metrics for probability predictions against binary
/// labels. Accuracy thresholds at 0.5 with ties predicted as 1; AUC uses
/// the rank statistic with midranks for tied predictions.
pub fn compute_metrics(predictions: &[f64], labels: &[u8], label: &str) -> Result<MetricsReport> {
    if predictions.is_empty() {
        return Err(Error::InvalidInput("metrics over empty input".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let n = predictions.len();
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut correct = 0usize;
    for (&p, &r) in predictions.iter().zip(labels) {
        let d = p - r as f64;
        se += d * d;
        ae += d.abs();
        let predicted = u8::from(p >= 0.5);
        if predicted == r {
            correct += 1;
        }
    }
    Ok(MetricsReport {
        rmse: (se / n as f64).sqrt(),
        mae: ae / n as f64,
        auc: auc_midrank(predictions, labels),
        acc: correct as f64 / n as f64,
        n,
        label: label.to_string(),
    })
}

/// AUC via the Mann-Whitney rank statistic with midranks for ties.
/// Returns `None` when either class is absent.
pub fn auc_midrank(predictions: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&r| r == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..predictions.len()).collect();
    idx.sort_by(|&a, &b| predictions[a].partial_cmp(&predictions[b]).unwrap());

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && predictions[idx[j + 1]] == predictions[idx[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share the midrank
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let auc = (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64;
    Some(auc)
}
