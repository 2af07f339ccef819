use serde::{Deserialize, Serialize};

use super::{EvalError, Result};

/// A detection unit: a gt lesion (positive) or a negative sextant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredUnit {
    pub score: f64,
    pub positive: bool,
}

fn class_counts(units: &[ScoredUnit]) -> (usize, usize) {
    let p = units.iter().filter(|u| u.positive).count();
    (p, units.len() - p)
}

/// Mann–Whitney form: `P(score_pos > score_neg) + ½·P(tie)`, via midranks.
pub fn roc_auc(units: &[ScoredUnit]) -> Result<f64> {
    let (np, nn) = class_counts(units);
    if np == 0 || nn == 0 {
        return Err(EvalError::DegenerateClasses { positives: np, negatives: nn });
    }
    let mut sorted: Vec<&ScoredUnit> = units.iter().collect();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].score == sorted[i].score {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * sorted[i..=j].iter().filter(|u| u.positive).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (np as f64, nn as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Empirical ROC points `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one point per distinct score.
pub fn roc_curve(units: &[ScoredUnit]) -> Result<Vec<[f64; 2]>> {
    let (np, nn) = class_counts(units);
    if np == 0 || nn == 0 {
        return Err(EvalError::DegenerateClasses { positives: np, negatives: nn });
    }
    let mut sorted: Vec<&ScoredUnit> = units.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut pts = vec![[0.0, 0.0]];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].score;
        while i < sorted.len() && sorted[i].score == s {
            if sorted[i].positive {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push([fp as f64 / nn as f64, tp as f64 / np as f64]);
    }
    Ok(pts)
}

/// Area under a polyline by the trapezoid rule.
pub fn trapezoid_area(points: &[[f64; 2]]) -> f64 {
    points.windows(2).map(|w| (w[1][0] - w[0][0]) * (w[1][1] + w[0][1]) / 2.0).sum()
}

/// Descending-score order; at equal scores negatives come first (pessimistic).
fn ranked(units: &[ScoredUnit]) -> Vec<&ScoredUnit> {
    let mut sorted: Vec<&ScoredUnit> = units.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.positive.cmp(&b.positive)));
    sorted
}

/// Average precision: mean over positives of the precision at each
/// positive's rank.
pub fn pr_auc(units: &[ScoredUnit]) -> Result<f64> {
    let (np, nn) = class_counts(units);
    if np == 0 {
        return Err(EvalError::DegenerateClasses { positives: np, negatives: nn });
    }
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (k, u) in ranked(units).iter().enumerate() {
        if u.positive {
            tp += 1;
            sum += tp as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / np as f64)
}

/// `(recall, precision)` at each positive in rank order.
pub fn pr_curve(units: &[ScoredUnit]) -> Result<Vec<[f64; 2]>> {
    let (np, nn) = class_counts(units);
    if np == 0 {
        return Err(EvalError::DegenerateClasses { positives: np, negatives: nn });
    }
    let mut tp = 0usize;
    let mut pts = Vec::with_capacity(np);
    for (k, u) in ranked(units).iter().enumerate() {
        if u.positive {
            tp += 1;
            pts.push([tp as f64 / np as f64, tp as f64 / (k + 1) as f64]);
        }
    }
    Ok(pts)
}
