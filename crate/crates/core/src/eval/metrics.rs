//! Ranking and threshold metrics over (score, label) pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Metric(format!("score {s} is not a number")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Metric("labels must be 0 or 1".into()));
    }
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by descending score, split into groups of equal score.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Mann-Whitney AUC: the fraction of positive-negative pairs ranked
/// correctly, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!("AUC needs both classes (positives {pos}, negatives {neg})")));
    }
    // Walk from the highest score: each negative beats no positive below it.
    let mut pos_above = 0u64;
    let mut twice_wins = 0u64;
    for g in tie_groups(scores) {
        let gp = g.iter().filter(|&&i| labels[i] == 1).count() as u64;
        let gn = g.len() as u64 - gp;
        twice_wins += 2 * pos_above * gn + gp * gn;
        pos_above += gp;
    }
    Ok(twice_wins as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Un-interpolated step AP: sum over descending thresholds of recall gain
/// times precision; tied scores form one threshold.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(Error::Metric("average precision needs at least one positive".into()));
    }
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0f64);
    for g in tie_groups(scores) {
        let gp = g.iter().filter(|&&i| labels[i] == 1).count();
        tp += gp;
        seen += g.len();
        if gp > 0 {
            ap += (gp as f64 / pos as f64) * (tp as f64 / seen as f64);
        }
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Counts with prediction 1 iff `score >= threshold`.
pub fn confusion_matrix(scores: &[f64], labels: &[u8], threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

/// ROC points `(threshold, fpr, tpr)` from the strictest threshold down.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64, f64)>> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("ROC curve needs both classes".into()));
    }
    let mut out = vec![(f64::INFINITY, 0.0, 0.0)];
    let (mut tp, mut fp) = (0, 0);
    for g in tie_groups(scores) {
        tp += g.iter().filter(|&&i| labels[i] == 1).count();
        fp += g.iter().filter(|&&i| labels[i] == 0).count();
        out.push((scores[g[0]], fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(out)
}

/// Precision-recall points `(threshold, recall, precision)`.
pub fn pr_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64, f64)>> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(Error::Metric("PR curve needs at least one positive".into()));
    }
    let mut out = Vec::new();
    let (mut tp, mut seen) = (0, 0);
    for g in tie_groups(scores) {
        tp += g.iter().filter(|&&i| labels[i] == 1).count();
        seen += g.len();
        out.push((scores[g[0]], tp as f64 / pos as f64, tp as f64 / seen as f64));
    }
    Ok(out)
}

/// Image-level score of a voxel-wise probability map: its maximum.
pub fn aggregate_segmentation(map: &Tensor<f32>) -> Result<f64> {
    if map.rank() != 3 {
        return Err(Error::Shape(format!("segmentation map must be [D, H, W], got {:?}", map.shape())));
    }
    if map.is_empty() {
        return Err(Error::Validation("segmentation map is empty".into()));
    }
    let mut best = f32::NEG_INFINITY;
    for &v in map.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Validation(format!("probability {v} outside [0, 1]")));
        }
        best = best.max(v);
    }
    Ok(best as f64)
}
