//! Evaluation metrics.

use crate::error::{Error, Result};
use crate::volume::LabelMask;

/// Dice similarity coefficient between binary masks: `2|P∩G| / (|P|+|G|)`,
/// with the both-empty case defined as 1.0.
pub fn dice_score(pred: &LabelMask, gt: &LabelMask) -> Result<f64> {
    if pred.data.shape() != gt.data.shape() {
        return Err(Error::InvalidShape(format!(
            "dice score: prediction {:?} vs ground truth {:?}",
            pred.data.shape(),
            gt.data.shape()
        )));
    }
    let inter: f64 = pred
        .data
        .data()
        .iter()
        .zip(gt.data.data())
        .map(|(&p, &g)| p * g)
        .sum();
    let total = pred.data.sum() + gt.data.sum();
    if total == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter / total)
}
