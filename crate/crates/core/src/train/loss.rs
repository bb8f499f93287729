use crate::error::{Error, Result};

pub const BCE_EPS: f64 = 1e-7;

/// Weighted binary cross entropy on probabilities, averaged over the batch.
///
/// Scores are clamped to `[eps, 1 - eps]`; where the clamp is active the
/// returned gradient is zero, matching the clamped expression.
pub fn weighted_bce(scores: &[f64], labels: &[u8], weights: (f64, f64)) -> Result<(f64, Vec<f64>)> {
    if scores.is_empty() {
        return Err(Error::Numeric("BCE over an empty batch".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let n = scores.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (&s, &y) in scores.iter().zip(labels) {
        if y > 1 {
            return Err(Error::Validation(format!("label {y} is not binary")));
        }
        let c = s.clamp(BCE_EPS, 1.0 - BCE_EPS);
        let clamped = c != s;
        if y == 1 {
            loss -= weights.1 * c.ln();
            grad.push(if clamped { 0.0 } else { -weights.1 / (c * n) });
        } else {
            loss -= weights.0 * (1.0 - c).ln();
            grad.push(if clamped { 0.0 } else { weights.0 / ((1.0 - c) * n) });
        }
    }
    Ok((loss / n, grad))
}
