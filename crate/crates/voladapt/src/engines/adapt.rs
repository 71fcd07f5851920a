//! Few-shot adaptation of a pretrained model to a target task.
//!
//! Only the strategy's trainable parameters receive updates; everything else
//! is frozen bit-exactly, including batch-norm running statistics. The
//! transductive variant adds the size-margin penalty on the predicted query
//! size during the final epochs, with the predicted size computed on the
//! stitched full-query probability map so its gradient flows through every
//! tile.

use crate::autodiff::Tape;
use crate::engines::infer::{query_tile_features, stitched_probs_on_tape};
use crate::engines::optimizer::{cosine_lr, AdamW};
use crate::engines::pretrain::EpochLog;
use crate::engines::sampling::{foreground_indices, sample_patch_origin};
use crate::error::{Error, Result};
use crate::nets::layers::Mode;
use crate::nets::{Backbone, SegHead, SegModel, TrainStrategy};
use crate::objectives::{
    adaptation_objective, predicted_size, size_margin_penalty_value, support_size_prior,
    PenaltyConfig, SizePrior, SupportLoss,
};
use crate::phantom::FewShotTask;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::volume::{extract_mask_patch, extract_patch, LabelMask};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub strategy: TrainStrategy,
    /// Number of support shots K; must match the task.
    pub shots: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    /// First epoch (0-based) at which the size constraint applies.
    pub ti_start_epoch: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub patches_per_volume: usize,
    pub patch_size: [usize; 3],
    pub support_loss: SupportLoss,
    pub weight_decay: f64,
    /// Overlap fraction for the stitched query prediction.
    pub sw_overlap: f64,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            strategy: TrainStrategy::Adapter,
            shots: 1,
            epochs: 100,
            base_lr: 0.5,
            warmup_epochs: 0,
            ti_start_epoch: 50,
            gamma: 0.2,
            lambda: 1.0,
            patches_per_volume: 6,
            patch_size: [32, 32, 32],
            support_loss: SupportLoss::Dice,
            weight_decay: 0.0,
            sw_overlap: 0.25,
            seed: 23,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 {
            return Err(Error::Config("shots must be >= 1".into()));
        }
        if self.ti_start_epoch > self.epochs {
            return Err(Error::Config(format!(
                "ti_start_epoch {} exceeds epochs {}",
                self.ti_start_epoch, self.epochs
            )));
        }
        PenaltyConfig::new(self.gamma, self.lambda)?;
        if self.patches_per_volume == 0 {
            return Err(Error::Config("patches_per_volume must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdaptReport {
    pub epoch_logs: Vec<EpochLog>,
    pub prior: Option<SizePrior>,
    /// Predicted query size at each TI evaluation (epoch index, value).
    pub s_hat_trace: Vec<(usize, f64)>,
}

impl AdaptReport {
    pub fn first_support_loss(&self) -> Option<f64> {
        self.epoch_logs.first().map(|l| l.support_term)
    }

    pub fn final_support_loss(&self) -> Option<f64> {
        self.epoch_logs.last().map(|l| l.support_term)
    }
}

/// Assemble the strategy's model from a pretrained checkpoint model.
pub fn assemble_for_task(
    pretrained: &SegModel,
    strategy: TrainStrategy,
    target_class: usize,
    seed: u64,
) -> Result<SegModel> {
    let arch = pretrained.arch();
    let head = match &pretrained.head {
        crate::nets::HeadKind::Original(h) => h.clone(),
        _ => return Err(Error::Config("pretrained checkpoint must carry the original head".into())),
    };
    let (backbone, head) = if strategy == TrainStrategy::Scratch {
        (Backbone::init(arch, Rng::new(seed).split(0x5C).next_u64()), SegHead::init(arch, Rng::new(seed).split(0x5D).next_u64()))
    } else {
        (pretrained.backbone.clone(), head)
    };
    let mut model = SegModel::assemble(backbone, head, strategy, target_class, Rng::new(seed).split(0x4E).next_u64())?;
    model.strategy = strategy;
    Ok(model)
}

/// Adapt a pretrained model to a few-shot task. Returns the adapted model
/// and the training report. `GENERALIZATION` returns the assembled model
/// unchanged by contract. The query ground truth is never read.
pub fn adapt(pretrained: &SegModel, task: &FewShotTask, cfg: &AdaptConfig) -> Result<(SegModel, AdaptReport)> {
    cfg.validate()?;
    if task.shots() != cfg.shots {
        return Err(Error::Config(format!(
            "task has {} support shots but config expects {}",
            task.shots(),
            cfg.shots
        )));
    }
    let mut model = assemble_for_task(pretrained, cfg.strategy, task.organ_class, cfg.seed)?;
    let mut report = AdaptReport::default();
    let support_masks: Vec<&LabelMask> = task.support.iter().map(|(_, m)| m).collect();
    report.prior = Some(support_size_prior(&support_masks)?);
    if cfg.strategy == TrainStrategy::Generalization {
        return Ok((model, report));
    }
    let part_full = model.select_trainable()?;
    let part = part_full.as_partition();
    let mut opt = AdamW::new(cfg.weight_decay);
    let prior = report.prior.unwrap();

    let fg: Vec<Vec<usize>> = task
        .support
        .iter()
        .map(|(_, m)| foreground_indices(&m.data, &[0]))
        .collect();

    // The transductive penalty needs per-tile query features; the backbone is
    // frozen under adapter strategies, so they are computed once.
    let use_ti = cfg.strategy.transductive() && cfg.lambda > 0.0;
    let query_feats = if use_ti {
        if !cfg.strategy.uses_adapter() {
            return Err(Error::Config("transductive inference requires the adapter head".into()));
        }
        let (feats, origins) = query_tile_features(&mut model, &task.query, cfg.patch_size, cfg.sw_overlap)?;
        Some((feats, origins))
    } else {
        None
    };
    let query_shape = task.query.shape();
    let penalty_cfg = PenaltyConfig::new(cfg.gamma, cfg.lambda)?;
    let support_only = PenaltyConfig::new(cfg.gamma, 0.0)?;

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.base_lr, epoch, cfg.warmup_epochs, cfg.epochs);
        let mut epoch_rng = Rng::new(cfg.seed).split(0xAD).split(epoch as u64);
        let ti_now = use_ti && epoch >= cfg.ti_start_epoch;
        let mut epoch_support = 0.0;
        let mut epoch_penalty = 0.0;
        #[allow(clippy::needless_range_loop)] // k_idx also drives the TI-attachment rule
        for k_idx in 0..cfg.shots {
            let (vol, mask) = &task.support[k_idx];
            let vol_shape = vol.shape();
            let mut tape = Tape::new();
            let (bound, vars) = model.bind(&mut tape, &part);
            let mut probs_vars = Vec::with_capacity(cfg.patches_per_volume);
            let mut mask_patches = Vec::with_capacity(cfg.patches_per_volume);
            for _ in 0..cfg.patches_per_volume {
                let origin = sample_patch_origin(vol_shape, cfg.patch_size, &fg[k_idx], &mut epoch_rng);
                let vol_patch = extract_patch(vol, origin, cfg.patch_size).data;
                let mask_patch = extract_mask_patch(mask, origin, cfg.patch_size);
                let pv = tape.leaf(vol_patch.insert_channel_axis(), false);
                let probs = model.forward_target_probs(&mut tape, &vars, pv, Mode::Train)?;
                probs_vars.push(probs);
                mask_patches.push(mask_patch);
            }
            let mask_refs: Vec<&LabelMask> = mask_patches.iter().collect();
            // attach the size term on the last support iteration of the epoch
            let attach_ti = ti_now && k_idx == cfg.shots - 1;
            let (objective, penalty_value) = if attach_ti {
                let (feats, origins) = query_feats.as_ref().unwrap();
                let stitched = stitched_probs_on_tape(
                    &mut model,
                    &mut tape,
                    &vars,
                    feats,
                    origins,
                    query_shape,
                    Mode::Eval,
                )?;
                let s_hat = predicted_size(&mut tape, stitched);
                let s_hat_value = tape.value(s_hat).item();
                let obj = adaptation_objective(
                    &mut tape,
                    &probs_vars,
                    &mask_refs,
                    Some(s_hat),
                    &prior,
                    &penalty_cfg,
                    cfg.support_loss,
                )?;
                let pen = size_margin_penalty_value(s_hat_value, prior.voxels, cfg.gamma)?;
                report.s_hat_trace.push((epoch, s_hat_value));
                (obj, pen)
            } else {
                let obj = adaptation_objective(
                    &mut tape,
                    &probs_vars,
                    &mask_refs,
                    None,
                    &prior,
                    &support_only,
                    cfg.support_loss,
                )?;
                (obj, 0.0)
            };
            let total = tape.value(objective).item();
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, lr, batch: vec![k_idx] });
            }
            tape.backward(objective)?;
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            for (name, var) in &bound.entries {
                if let Some(g) = tape.grad(*var) {
                    grads.insert(name.clone(), g.clone());
                }
            }
            drop(tape);
            let mut named = Vec::new();
            model.named_params_mut(&mut named);
            opt.step(&mut named, &grads, lr);
            epoch_support += total - cfg.lambda * penalty_value;
            epoch_penalty += penalty_value;
        }
        let support_term = epoch_support / cfg.shots as f64;
        let penalty_term = epoch_penalty; // at most one TI evaluation per epoch
        report.epoch_logs.push(EpochLog {
            epoch,
            lr,
            loss: support_term + cfg.lambda * penalty_term,
            support_term,
            penalty_term,
        });
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::Arch;
    use crate::phantom::{build_fewshot_task, DatasetSpec, OrganSpec, QueryGroundTruth};
    use crate::volume::AnnotationVector;

    fn organs() -> Vec<OrganSpec> {
        vec![OrganSpec {
            class_id: 0,
            center_range: [(0.4, 0.6); 3],
            radii_range: [(0.18, 0.26); 3],
            intensity_mean: 0.75,
            intensity_sigma: 0.03,
            allow_overlap: false,
        }]
    }

    fn target_spec() -> DatasetSpec {
        DatasetSpec {
            name: "target".into(),
            n_volumes: 1,
            annotation: AnnotationVector(vec![1]),
            grid_shape: [16, 16, 16],
            spacing: [1.5; 3],
            base_intensity: 0.2,
            noise_sigma: 0.04,
            intensity_shift: 0.0,
            intensity_jitter: 0.0,
            radii_scale: 1.0,
        }
    }

    fn pretrained() -> SegModel {
        SegModel::for_pretraining(Arch::standard(2, 4, 1), 3)
    }

    fn quick_cfg(strategy: TrainStrategy, epochs: usize) -> AdaptConfig {
        AdaptConfig {
            strategy,
            shots: 1,
            epochs,
            base_lr: 0.05,
            ti_start_epoch: epochs / 2,
            patches_per_volume: 2,
            patch_size: [8, 8, 8],
            sw_overlap: 0.0,
            seed: 9,
            ..AdaptConfig::default()
        }
    }

    #[test]
    fn generalization_is_a_no_op() {
        let pre = pretrained();
        let task = build_fewshot_task(&target_spec(), &organs(), 1, 0, 1, 5).unwrap();
        let (adapted, report) = adapt(&pre, &task, &quick_cfg(TrainStrategy::Generalization, 4)).unwrap();
        assert!(report.epoch_logs.is_empty());
        let (a, b) = (pre.param_snapshot(), adapted.param_snapshot());
        for (name, t) in a.iter().filter(|(n, _)| n.starts_with("backbone.") || n.starts_with("head.")) {
            assert!(t.bit_eq(&b[name]), "param {name}");
        }
    }

    #[test]
    fn frozen_parameters_stay_bit_identical() {
        let pre = pretrained();
        let task = build_fewshot_task(&target_spec(), &organs(), 1, 0, 1, 5).unwrap();
        for strategy in [
            TrainStrategy::Adapter,
            TrainStrategy::AdapterTi,
            TrainStrategy::LinearProbe,
            TrainStrategy::FtLast,
        ] {
            let (adapted, _) = adapt(&pre, &task, &quick_cfg(strategy, 4)).unwrap();
            let part = adapted.select_trainable().unwrap();
            let before = pre.param_snapshot();
            let after = adapted.param_snapshot();
            for name in &part.frozen {
                assert!(
                    before[name].bit_eq(&after[name]),
                    "{strategy}: frozen {name} changed"
                );
            }
            // trainable parameters did move
            assert!(
                part.trainable.iter().any(|n| !before.contains_key(n) || !before[n].bit_eq(&after[n])),
                "{strategy}: nothing trained"
            );
        }
    }

    #[test]
    fn frozen_backbone_bn_stats_untouched() {
        let pre = pretrained();
        let task = build_fewshot_task(&target_spec(), &organs(), 1, 0, 1, 5).unwrap();
        let (adapted, _) = adapt(&pre, &task, &quick_cfg(TrainStrategy::Adapter, 3)).unwrap();
        let before = pre.backbone.bn_state();
        let after = adapted.backbone.bn_state();
        for ((k1, m1, v1), (k2, m2, v2)) in before.iter().zip(after.iter()) {
            assert_eq!(k1, k2);
            assert_eq!(m1, m2, "running mean moved for {k1}");
            assert_eq!(v1, v2, "running var moved for {k1}");
        }
    }

    #[test]
    fn adapter_ti_with_lambda_zero_matches_adapter_bitwise() {
        let pre = pretrained();
        let task = build_fewshot_task(&target_spec(), &organs(), 1, 0, 1, 5).unwrap();
        let mut cfg_a = quick_cfg(TrainStrategy::Adapter, 4);
        cfg_a.lambda = 0.0;
        let mut cfg_b = quick_cfg(TrainStrategy::AdapterTi, 4);
        cfg_b.lambda = 0.0;
        let (m1, _) = adapt(&pre, &task, &cfg_a).unwrap();
        let (m2, _) = adapt(&pre, &task, &cfg_b).unwrap();
        let (a, b) = (m1.param_snapshot(), m2.param_snapshot());
        for (name, t) in &a {
            assert!(t.bit_eq(&b[name]), "param {name}");
        }
    }

    #[test]
    fn ti_penalty_is_zero_before_schedule_start() {
        let pre = pretrained();
        let task = build_fewshot_task(&target_spec(), &organs(), 1, 0, 1, 5).unwrap();
        let mut cfg = quick_cfg(TrainStrategy::AdapterTi, 6);
        cfg.ti_start_epoch = 4;
        let (_, report) = adapt(&pre, &task, &cfg).unwrap();
        for log in &report.epoch_logs {
            if log.epoch < 4 {
                assert_eq!(log.penalty_term, 0.0, "epoch {}", log.epoch);
            }
        }
        assert!(report.s_hat_trace.iter().all(|(e, _)| *e >= 4));
        assert!(!report.s_hat_trace.is_empty());
    }

    #[test]
    fn poisoned_query_ground_truth_changes_nothing() {
        let pre = pretrained();
        let mut task = build_fewshot_task(&target_spec(), &organs(), 1, 0, 1, 5).unwrap();
        let cfg = quick_cfg(TrainStrategy::AdapterTi, 4);
        let (m1, _) = adapt(&pre, &task, &cfg).unwrap();
        // poison: replace the quarantined ground truth with garbage
        let g = task.query.shape();
        let poison = LabelMask::new(Tensor::full(&[1, g[0], g[1], g[2]], 1.0)).unwrap();
        task.replace_ground_truth(QueryGroundTruth::new(poison));
        let (m2, _) = adapt(&pre, &task, &cfg).unwrap();
        let (a, b) = (m1.param_snapshot(), m2.param_snapshot());
        for (name, t) in &a {
            assert!(t.bit_eq(&b[name]), "adaptation read the query ground truth ({name})");
        }
    }

    #[test]
    fn shots_mismatch_is_config_error() {
        let pre = pretrained();
        let task = build_fewshot_task(&target_spec(), &organs(), 1, 0, 2, 5).unwrap();
        let cfg = quick_cfg(TrainStrategy::Adapter, 2); // cfg.shots = 1
        assert!(adapt(&pre, &task, &cfg).is_err());
    }

    #[test]
    fn support_loss_decreases_over_training() {
        let pre = pretrained();
        let task = build_fewshot_task(&target_spec(), &organs(), 1, 0, 1, 5).unwrap();
        let mut cfg = quick_cfg(TrainStrategy::Adapter, 30);
        cfg.base_lr = 0.1;
        let (_, report) = adapt(&pre, &task, &cfg).unwrap();
        let first = report.first_support_loss().unwrap();
        let last = report.final_support_loss().unwrap();
        assert!(last < first, "support loss did not decrease: {first} -> {last}");
    }
}
