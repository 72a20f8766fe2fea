//! Overlap metrics for hard binary masks.

use crate::error::{Error, Result};
use crate::tensor::Float;

/// Foreground where `sigmoid(logit) >= 0.5`, i.e. `logit >= 0`.
pub fn threshold_logits<F: Float>(logits: &[F]) -> Vec<u8> {
    logits.iter().map(|&z| u8::from(z >= F::ZERO)).collect()
}

/// Foreground where the value is above one half.
pub fn binarize<F: Float>(values: &[F]) -> Vec<u8> {
    let half = F::from_f64(0.5);
    values.iter().map(|&v| u8::from(v > half)).collect()
}

/// `(|A ∩ B|, |A|, |B|)`.
fn counts(pred: &[u8], target: &[u8]) -> Result<(usize, usize, usize)> {
    if pred.len() != target.len() {
        return Err(Error::shape(format!(
            "prediction has {} pixels, target {}",
            pred.len(),
            target.len()
        )));
    }
    let (mut inter, mut a, mut b) = (0, 0, 0);
    for (&p, &t) in pred.iter().zip(target) {
        if p > 1 || t > 1 {
            return Err(Error::arg("masks must contain only 0 and 1"));
        }
        inter += usize::from(p & t);
        a += usize::from(p);
        b += usize::from(t);
    }
    Ok((inter, a, b))
}

/// `|A ∩ B| / |A ∪ B|`; two empty masks score 1.
pub fn iou(pred: &[u8], target: &[u8]) -> Result<f64> {
    let (inter, a, b) = counts(pred, target)?;
    let union = a + b - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `2 |A ∩ B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(pred: &[u8], target: &[u8]) -> Result<f64> {
    let (inter, a, b) = counts(pred, target)?;
    Ok(if a + b == 0 { 1.0 } else { 2.0 * inter as f64 / (a + b) as f64 })
}
