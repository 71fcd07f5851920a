//! Loss functions and size-prior estimators.
//!
//! The training losses are built on the autodiff tape so gradients flow to
//! whatever parameters produced the probability maps. Plain-value variants
//! exist for evaluation and for oracle tests that must not share code with
//! the differentiated path.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{AnnotationVector, LabelMask};
use serde::{Deserialize, Serialize};

/// Smoothing constant used in both the numerator and denominator of the soft
/// Dice loss; keeps the empty-vs-empty case at loss 0.
pub const DICE_EPS: f64 = 1e-5;

/// Expected foreground voxel count for the target organ at the working
/// resolution, estimated from support masks only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizePrior {
    /// Mean foreground voxel count over the support set.
    pub voxels: f64,
    /// Number of support samples the mean was computed from.
    pub shots: usize,
}

/// Margin and weight of the size-constraint term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    /// Margin fraction gamma in [0, 1).
    pub gamma: f64,
    /// Penalty weight lambda >= 0.
    pub lambda: f64,
}

impl PenaltyConfig {
    pub fn new(gamma: f64, lambda: f64) -> Result<Self> {
        let cfg = PenaltyConfig { gamma, lambda };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!(
                "gamma must be in [0, 1), got {}",
                self.gamma
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Segmentation loss used on the support set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SupportLoss {
    #[default]
    Dice,
    Ce,
    DiceCe,
}

/// Soft Dice loss on the tape: `1 - (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps)`.
pub fn dice_loss(tape: &mut Tape, probs: Var, target: &Tensor, eps: f64) -> Result<Var> {
    if tape.value(probs).shape() != target.shape() {
        return Err(Error::InvalidShape(format!(
            "dice: probs shape {:?} != target shape {:?}",
            tape.value(probs).shape(),
            target.shape()
        )));
    }
    Ok(tape.dice_loss(probs, target.clone(), eps))
}

/// Plain-value Dice loss for evaluation paths.
pub fn dice_loss_value(probs: &Tensor, target: &Tensor, eps: f64) -> Result<f64> {
    if probs.shape() != target.shape() {
        return Err(Error::InvalidShape(format!(
            "dice: probs shape {:?} != target shape {:?}",
            probs.shape(),
            target.shape()
        )));
    }
    let inter: f64 = probs.data().iter().zip(target.data()).map(|(p, y)| p * y).sum();
    Ok(1.0 - (2.0 * inter + eps) / (probs.sum() + target.sum() + eps))
}

/// Per-class support loss according to the configured flavor.
pub fn seg_loss(tape: &mut Tape, probs: Var, target: &Tensor, flavor: SupportLoss, eps: f64) -> Result<Var> {
    if tape.value(probs).shape() != target.shape() {
        return Err(Error::InvalidShape(format!(
            "seg loss: probs shape {:?} != target shape {:?}",
            tape.value(probs).shape(),
            target.shape()
        )));
    }
    Ok(match flavor {
        SupportLoss::Dice => tape.dice_loss(probs, target.clone(), eps),
        SupportLoss::Ce => tape.bce_loss(probs, target.clone()),
        SupportLoss::DiceCe => {
            let d = tape.dice_loss(probs, target.clone(), eps);
            let c = tape.bce_loss(probs, target.clone());
            tape.weighted_sum(&[(d, 1.0), (c, 1.0)])
        }
    })
}

/// Combine per-class losses into the masked partial-label objective: the mean
/// over annotated classes, with unannotated classes carrying zero weight.
pub fn masked_combine(tape: &mut Tape, class_losses: &[Var], w: &AnnotationVector) -> Result<Var> {
    if class_losses.len() != w.len() {
        return Err(Error::InvalidArgument(format!(
            "masked combine: {} class losses vs annotation length {}",
            class_losses.len(),
            w.len()
        )));
    }
    let annotated = w.annotated_count();
    if annotated == 0 {
        return Err(Error::InvalidArgument(
            "annotation vector is all zero; the masked loss is undefined".into(),
        ));
    }
    let inv = 1.0 / annotated as f64;
    let terms: Vec<(Var, f64)> = class_losses
        .iter()
        .zip(w.0.iter())
        .filter(|(_, &flag)| flag == 1)
        .map(|(&v, _)| (v, inv))
        .collect();
    Ok(tape.weighted_sum(&terms))
}

/// Masked partial-label loss over a C-channel probability map: per-class soft
/// Dice restricted to the classes annotated in `w`. Gradients w.r.t. the
/// probability channels of unannotated classes are exactly zero because those
/// channels never enter the graph.
pub fn masked_partial_loss(
    tape: &mut Tape,
    probs: Var,
    target: &LabelMask,
    w: &AnnotationVector,
    eps: f64,
) -> Result<Var> {
    let shape = tape.value(probs).shape().to_vec();
    if shape.len() != 4 || shape[0] != w.len() {
        return Err(Error::InvalidShape(format!(
            "masked loss: probs shape {:?} does not match {} classes",
            shape,
            w.len()
        )));
    }
    if target.channels() != w.len() || target.grid_shape() != [shape[1], shape[2], shape[3]] {
        return Err(Error::InvalidShape(format!(
            "masked loss: target {:?} incompatible with probs {:?}",
            target.data.shape(),
            shape
        )));
    }
    if w.annotated_count() == 0 {
        return Err(Error::InvalidArgument(
            "annotation vector is all zero; the masked loss is undefined".into(),
        ));
    }
    let grid = target.grid_shape();
    let mut class_losses = Vec::with_capacity(w.len());
    for c in 0..w.len() {
        if w.is_annotated(c) {
            let pc = tape.slice_channel(probs, c);
            let yc = Tensor::from_vec(&[1, grid[0], grid[1], grid[2]], target.data.channel(c).to_vec())?;
            class_losses.push(tape.dice_loss(pc, yc, eps));
        } else {
            // placeholder keeping indices aligned; weight is zero
            class_losses.push(tape.leaf(Tensor::scalar(0.0), false));
        }
    }
    masked_combine(tape, &class_losses, w)
}

/// Average target-region size over the support masks, in voxels.
pub fn support_size_prior(support_masks: &[&LabelMask]) -> Result<SizePrior> {
    if support_masks.is_empty() {
        return Err(Error::InvalidArgument("size prior needs at least one support mask".into()));
    }
    let mut total = 0.0;
    for m in support_masks {
        if m.channels() != 1 {
            return Err(Error::InvalidArgument(format!(
                "size prior expects single-channel masks, got {} channels",
                m.channels()
            )));
        }
        total += m.foreground_count(0);
    }
    Ok(SizePrior { voxels: total / support_masks.len() as f64, shots: support_masks.len() })
}

/// Soft predicted size: the sum of the probability map, on the tape.
pub fn predicted_size(tape: &mut Tape, probs: Var) -> Var {
    tape.sum_all(probs)
}

/// Plain-value predicted size.
pub fn predicted_size_value(probs: &Tensor) -> f64 {
    probs.sum()
}

/// Piecewise size-margin penalty value:
/// `|s_hat - (1-gamma)*s|` below the band, `|s_hat - (1+gamma)*s|` above it,
/// and zero on the closed band `[(1-gamma)*s, (1+gamma)*s]`.
pub fn size_margin_penalty_value(s_hat: f64, s: f64, gamma: f64) -> Result<f64> {
    if s < 0.0 {
        return Err(Error::InvalidArgument(format!("size prior must be >= 0, got {s}")));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma must be in [0, 1), got {gamma}")));
    }
    let lo = (1.0 - gamma) * s;
    let hi = (1.0 + gamma) * s;
    Ok(if s_hat < lo {
        (s_hat - lo).abs()
    } else if s_hat > hi {
        (s_hat - hi).abs()
    } else {
        0.0
    })
}

/// Size-margin penalty on the tape, differentiable in `s_hat`.
pub fn size_margin_penalty(tape: &mut Tape, s_hat: Var, prior: &SizePrior, gamma: f64) -> Result<Var> {
    if prior.voxels < 0.0 {
        return Err(Error::InvalidArgument(format!("size prior must be >= 0, got {}", prior.voxels)));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma must be in [0, 1), got {gamma}")));
    }
    Ok(tape.size_penalty(s_hat, prior.voxels, gamma))
}

/// The transductive adaptation objective: mean support segmentation loss plus
/// `lambda` times the size-margin penalty on the predicted query size.
/// With `lambda == 0` this reduces exactly to the support-only objective and
/// `query_s_hat` may be omitted.
pub fn adaptation_objective(
    tape: &mut Tape,
    support_probs: &[Var],
    support_masks: &[&LabelMask],
    query_s_hat: Option<Var>,
    prior: &SizePrior,
    cfg: &PenaltyConfig,
    flavor: SupportLoss,
) -> Result<Var> {
    cfg.validate()?;
    if support_probs.is_empty() || support_probs.len() != support_masks.len() {
        return Err(Error::InvalidArgument(format!(
            "adaptation objective needs matching non-empty support probs/masks, got {}/{}",
            support_probs.len(),
            support_masks.len()
        )));
    }
    let mut terms: Vec<(Var, f64)> = Vec::with_capacity(support_probs.len() + 1);
    let inv_k = 1.0 / support_probs.len() as f64;
    for (&p, m) in support_probs.iter().zip(support_masks) {
        if m.channels() != 1 {
            return Err(Error::InvalidArgument("support masks must be single-channel".into()));
        }
        let l = seg_loss(tape, p, &m.data, flavor, DICE_EPS)?;
        terms.push((l, inv_k));
    }
    if cfg.lambda > 0.0 {
        let s_hat = query_s_hat.ok_or_else(|| {
            Error::InvalidArgument("lambda > 0 requires a predicted query size".into())
        })?;
        let pen = size_margin_penalty(tape, s_hat, prior, cfg.gamma)?;
        terms.push((pen, cfg.lambda));
    }
    Ok(tape.weighted_sum(&terms))
}
