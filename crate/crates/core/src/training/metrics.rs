use serde::{Deserialize, Serialize};

use super::loss::PROB_FLOOR;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub balanced_accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub macro_auc: f64,
    pub cross_entropy: f64,
}

impl MetricsReport {
    pub const FIELDS: [&'static str; 6] = [
        "balanced_accuracy",
        "macro_precision",
        "macro_recall",
        "macro_f1",
        "macro_auc",
        "cross_entropy",
    ];

    pub fn values(&self) -> [f64; 6] {
        [
            self.balanced_accuracy,
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
            self.macro_auc,
            self.cross_entropy,
        ]
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Rank AUC of `scores` for the positives flagged in `positive`. Ties count
/// one half. `None` when either side is empty.
pub fn rank_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks over tie groups
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Balanced accuracy, macro one-vs-rest precision/recall/F1/AUC, and mean
/// cross-entropy of `probs` (`N × C`) against `labels`.
///
/// Classes absent from `labels` are left out of every macro average.
/// Precision of a class never predicted is 0, as is F1 when precision and
/// recall are both 0.
pub fn compute_metrics(probs: &[Vec<f64>], labels: &[usize]) -> Result<MetricsReport> {
    if probs.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let n_classes = probs.first().map(Vec::len).ok_or_else(|| Error::invalid("no predictions"))?;
    if probs.iter().any(|p| p.len() != n_classes) {
        return Err(Error::shape("ragged probability rows"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::invalid(format!("label {l} out of range for {n_classes} classes")));
    }
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let mut tp = vec![0usize; n_classes];
    let mut predicted = vec![0usize; n_classes];
    let mut actual = vec![0usize; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        predicted[p] += 1;
        actual[l] += 1;
        if p == l {
            tp[l] += 1;
        }
    }
    let present: Vec<usize> = (0..n_classes).filter(|&c| actual[c] > 0).collect();
    let skipped = n_classes - present.len();
    if skipped > 0 {
        log::warn!("{skipped} classes have no examples and are left out of macro metrics");
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mut prec = 0.0;
    let mut rec = 0.0;
    let mut f1 = 0.0;
    let mut auc = 0.0;
    let mut auc_n = 0;
    for &c in &present {
        let p = ratio(tp[c], predicted[c]);
        let r = ratio(tp[c], actual[c]);
        prec += p;
        rec += r;
        f1 += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        let scores: Vec<f64> = probs.iter().map(|row| row[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if let Some(a) = rank_auc(&scores, &pos) {
            auc += a;
            auc_n += 1;
        }
    }
    let k = present.len() as f64;
    let ce = probs
        .iter()
        .zip(labels)
        .map(|(p, &l)| -p[l].max(PROB_FLOOR).ln())
        .sum::<f64>()
        / labels.len() as f64;
    Ok(MetricsReport {
        balanced_accuracy: rec / k,
        macro_precision: prec / k,
        macro_recall: rec / k,
        macro_f1: f1 / k,
        macro_auc: if auc_n == 0 { 0.5 } else { auc / auc_n as f64 },
        cross_entropy: ce,
    })
}
