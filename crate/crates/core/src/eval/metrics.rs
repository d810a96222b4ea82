use serde::{Deserialize, Serialize};

use crate::datapipe::Label;
use crate::scoring::require_both;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    /// Counts for the rule "anomalous when score > threshold".
    pub fn at_threshold(scores: &[f64], labels: &[Label], threshold: f64) -> Self {
        let mut c = Self::default();
        for (s, l) in scores.iter().zip(labels) {
            match (*s > threshold, l.is_anomalous()) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a zero denominator forced a metric to 0.
    pub degenerate: bool,
}

pub fn prf1(c: &ConfusionCounts) -> Prf1 {
    let mut degenerate = false;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = f1_from(precision, recall);
    Prf1 {
        precision,
        recall,
        f1,
        degenerate: degenerate || c.tp == 0,
    }
}

/// Harmonic mean, 0 when both are 0.
pub fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Mann–Whitney AUC with ties counted one half.
pub fn auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    require_both(labels)?;
    if let Some(v) = scores.iter().find(|v| v.is_nan()) {
        return Err(Error::Precondition(format!("score {v} cannot be ranked")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of doubled mid-ranks of the anomalous samples keeps everything integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j) as u128; // 2 × average of ranks i+1..=j
        for &k in &order[i..j] {
            if labels[k].is_anomalous() {
                rank_sum2 += mid2;
            }
        }
        i = j;
    }
    let pos = labels.iter().filter(|l| l.is_anomalous()).count() as u128;
    let neg = labels.len() as u128 - pos;
    let u2 = rank_sum2 - pos * (pos + 1);
    Ok(u2 as f64 / (2 * pos * neg) as f64)
}
