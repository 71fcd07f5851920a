//! Foundation-model pretraining on a partially-labeled assembly.
//!
//! Optimizes the masked partial-label Dice objective over randomly sampled
//! patches: each sample's loss covers only the classes its source dataset
//! annotates, so gradients for unannotated class heads are exactly zero.

use crate::autodiff::Tape;
use crate::engines::optimizer::{cosine_lr, AdamW};
use crate::engines::sampling::{
    foreground_indices, intensity_shift, random_rot90, rot90, sample_patch_origin,
};
use crate::error::{Error, Result};
use crate::nets::layers::Mode;
use crate::nets::SegModel;
use crate::objectives::{masked_partial_loss, DICE_EPS};
use crate::phantom::Assembly;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::volume::{extract_mask_patch, extract_patch};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub patches_per_volume: usize,
    pub batch_volumes: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub patch_size: [usize; 3],
    pub augment_intensity: bool,
    pub augment_rot90: bool,
    pub intensity_shift_magnitude: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        // §-scale protocol constants scaled to desk size; the full-scale
        // values (96³ patches, 120 epochs, 3x2 batch) remain reachable.
        PretrainConfig {
            epochs: 40,
            patches_per_volume: 3,
            batch_volumes: 2,
            base_lr: 1e-4,
            warmup_epochs: 10,
            weight_decay: 1e-5,
            patch_size: [32, 32, 32],
            augment_intensity: true,
            augment_rot90: true,
            intensity_shift_magnitude: 0.1,
            seed: 17,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("pretrain epochs must be >= 1".into()));
        }
        if self.patches_per_volume == 0 || self.batch_volumes == 0 {
            return Err(Error::Config("patches_per_volume and batch_volumes must be >= 1".into()));
        }
        for &d in &self.patch_size {
            if d % crate::nets::PATCH_DIVISOR != 0 {
                return Err(Error::Config(format!(
                    "patch size {:?} must be divisible by {}",
                    self.patch_size,
                    crate::nets::PATCH_DIVISOR
                )));
            }
        }
        Ok(())
    }
}

/// One line of the epoch log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Support (segmentation) term; equals `loss` when no penalty exists.
    pub support_term: f64,
    /// Size-penalty term; always zero during pretraining.
    pub penalty_term: f64,
}

#[derive(Debug, Clone, Default)]
pub struct PretrainReport {
    pub epoch_logs: Vec<EpochLog>,
    pub final_loss: f64,
}

/// Train `model` (original multi-class head) on the assembly from
/// `start_epoch` to `cfg.epochs`, mutating parameters, batch-norm state, and
/// the optimizer in place. Deterministic given `(cfg.seed, start_epoch)`;
/// resuming at an epoch boundary with the saved optimizer state reproduces
/// the uninterrupted run exactly.
pub fn pretrain(
    assembly: &Assembly,
    model: &mut SegModel,
    opt: &mut AdamW,
    cfg: &PretrainConfig,
    start_epoch: usize,
) -> Result<PretrainReport> {
    cfg.validate()?;
    if assembly.samples.is_empty() {
        return Err(Error::InvalidArgument("assembly has no samples".into()));
    }
    let part = model.select_trainable()?.as_partition();

    // per-sample foreground indices over annotated classes
    let fg: Vec<Vec<usize>> = assembly
        .samples
        .iter()
        .map(|s| {
            let annotated: Vec<usize> = (0..s.annotation.len())
                .filter(|&c| s.annotation.is_annotated(c))
                .collect();
            foreground_indices(&s.labels.data, &annotated)
        })
        .collect();

    let mut report = PretrainReport::default();
    let n_patches_per_batch = (cfg.batch_volumes * cfg.patches_per_volume) as f64;
    for epoch in start_epoch..cfg.epochs {
        let lr = cosine_lr(cfg.base_lr, epoch, cfg.warmup_epochs, cfg.epochs);
        let mut epoch_rng = Rng::new(cfg.seed).split(0xE0).split(epoch as u64);
        let mut order: Vec<usize> = (0..assembly.samples.len()).collect();
        epoch_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0.0;
        for batch in order.chunks(cfg.batch_volumes) {
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut batch_loss = 0.0;
            for &vi in batch {
                let sample = &assembly.samples[vi];
                let vol_shape = sample.volume.shape();
                for _ in 0..cfg.patches_per_volume {
                    let origin =
                        sample_patch_origin(vol_shape, cfg.patch_size, &fg[vi], &mut epoch_rng);
                    let mut vol_patch = extract_patch(&sample.volume, origin, cfg.patch_size).data;
                    let mut mask_patch = extract_mask_patch(&sample.labels, origin, cfg.patch_size);
                    if cfg.augment_rot90 {
                        let (plane, k) = random_rot90(&mut epoch_rng);
                        if k > 0 {
                            vol_patch = rot90(&vol_patch, plane, k);
                            let g = mask_patch.grid_shape();
                            let mut rotated = Tensor::zeros(mask_patch.data.shape());
                            for c in 0..mask_patch.channels() {
                                let ch = Tensor::from_vec(
                                    &[g[0], g[1], g[2]],
                                    mask_patch.data.channel(c).to_vec(),
                                )?;
                                rotated.channel_mut(c).copy_from_slice(rot90(&ch, plane, k).data());
                            }
                            mask_patch = crate::volume::LabelMask { data: rotated };
                        }
                    }
                    if cfg.augment_intensity {
                        intensity_shift(&mut vol_patch, cfg.intensity_shift_magnitude, &mut epoch_rng);
                    }
                    let mut tape = Tape::new();
                    let (bound, vars) = model.bind(&mut tape, &part);
                    let pv = tape.leaf(vol_patch.insert_channel_axis(), false);
                    let probs = model.forward_all_probs(&mut tape, &vars, pv, Mode::Train)?;
                    let loss = masked_partial_loss(
                        &mut tape,
                        probs,
                        &mask_patch,
                        &sample.annotation,
                        DICE_EPS,
                    )?;
                    batch_loss += tape.value(loss).item();
                    tape.backward(loss)?;
                    for (name, var) in &bound.entries {
                        if let Some(g) = tape.grad(*var) {
                            grads
                                .entry(name.clone())
                                .and_modify(|acc| acc.axpy(1.0, g))
                                .or_insert_with(|| g.clone());
                        }
                    }
                }
            }
            let batch_mean = batch_loss / n_patches_per_batch;
            if !batch_mean.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, lr, batch: batch.to_vec() });
            }
            for g in grads.values_mut() {
                g.scale(1.0 / n_patches_per_batch);
            }
            let mut named = Vec::new();
            model.named_params_mut(&mut named);
            opt.step(&mut named, &grads, lr);
            epoch_loss += batch_mean;
            n_batches += 1.0;
        }
        let mean = epoch_loss / n_batches;
        report.epoch_logs.push(EpochLog {
            epoch,
            lr,
            loss: mean,
            support_term: mean,
            penalty_term: 0.0,
        });
        report.final_loss = mean;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Arch, SegModel};
    use crate::phantom::{build_assembly, DatasetSpec, OrganSpec};
    use crate::volume::AnnotationVector;

    fn tiny_organs() -> Vec<OrganSpec> {
        vec![
            OrganSpec {
                class_id: 0,
                center_range: [(0.3, 0.4), (0.45, 0.55), (0.45, 0.55)],
                radii_range: [(0.12, 0.18); 3],
                intensity_mean: 0.75,
                intensity_sigma: 0.02,
                allow_overlap: false,
            },
            OrganSpec {
                class_id: 1,
                center_range: [(0.65, 0.75), (0.45, 0.55), (0.45, 0.55)],
                radii_range: [(0.1, 0.15); 3],
                intensity_mean: 0.55,
                intensity_sigma: 0.02,
                allow_overlap: false,
            },
        ]
    }

    fn tiny_assembly(n: usize) -> crate::phantom::Assembly {
        let specs = vec![
            DatasetSpec {
                name: "a".into(),
                n_volumes: n,
                annotation: AnnotationVector(vec![1, 0]),
                grid_shape: [16, 16, 16],
                spacing: [1.5; 3],
                base_intensity: 0.2,
                noise_sigma: 0.04,
                intensity_shift: 0.0,
                intensity_jitter: 0.0,
                radii_scale: 1.0,
            },
            DatasetSpec {
                name: "b".into(),
                n_volumes: n,
                annotation: AnnotationVector(vec![0, 1]),
                grid_shape: [16, 16, 16],
                spacing: [1.5; 3],
                base_intensity: 0.2,
                noise_sigma: 0.04,
                intensity_shift: 0.0,
                intensity_jitter: 0.0,
                radii_scale: 1.0,
            },
        ];
        build_assembly(&specs, &tiny_organs(), 2, 33).unwrap()
    }

    fn tiny_cfg(epochs: usize) -> PretrainConfig {
        PretrainConfig {
            epochs,
            patches_per_volume: 1,
            batch_volumes: 2,
            base_lr: 3e-3,
            warmup_epochs: 1,
            patch_size: [8, 8, 8],
            seed: 5,
            ..PretrainConfig::default()
        }
    }

    #[test]
    fn one_epoch_smoke_finite_loss() {
        let asm = tiny_assembly(2);
        let mut model = SegModel::for_pretraining(Arch::standard(2, 4, 2), 11);
        let mut opt = AdamW::new(1e-5);
        let report = pretrain(&asm, &mut model, &mut opt, &tiny_cfg(1), 0).unwrap();
        assert_eq!(report.epoch_logs.len(), 1);
        assert!(report.final_loss.is_finite());
        assert!(report.final_loss > 0.0);
    }

    #[test]
    fn never_annotated_class_head_stays_fixed() {
        // class 1 never annotated anywhere: its head row must not move
        let specs = vec![DatasetSpec {
            name: "only0".into(),
            n_volumes: 3,
            annotation: AnnotationVector(vec![1, 0]),
            grid_shape: [16, 16, 16],
            spacing: [1.5; 3],
            base_intensity: 0.2,
            noise_sigma: 0.04,
            intensity_shift: 0.0,
            intensity_jitter: 0.0,
            radii_scale: 1.0,
        }];
        let asm = build_assembly(&specs, &tiny_organs(), 2, 7).unwrap();
        let mut model = SegModel::for_pretraining(Arch::standard(2, 4, 2), 13);
        let before = model.param_snapshot();
        // nonzero decay: the head is excluded from decay precisely so that
        // unannotated rows cannot drift
        let mut opt = AdamW::new(1e-5);
        pretrain(&asm, &mut model, &mut opt, &tiny_cfg(2), 0).unwrap();
        let after = model.param_snapshot();
        // head weight rows: shape [C, D, 1, 1, 1]; class-1 row untouched
        let (wb, wa) = (&before["head.weight"], &after["head.weight"]);
        let d = wb.shape()[1];
        for i in 0..d {
            assert_eq!(wb.data()[d + i].to_bits(), wa.data()[d + i].to_bits(), "class-1 weight {i}");
        }
        assert_eq!(before["head.bias"].data()[1].to_bits(), after["head.bias"].data()[1].to_bits());
        // class-0 row trained
        assert!((0..d).any(|i| wb.data()[i] != wa.data()[i]));
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let asm = tiny_assembly(2);
        let run = || {
            let mut model = SegModel::for_pretraining(Arch::standard(2, 4, 2), 11);
            let mut opt = AdamW::new(1e-5);
            pretrain(&asm, &mut model, &mut opt, &tiny_cfg(2), 0).unwrap();
            model.param_snapshot()
        };
        let a = run();
        let b = run();
        for (name, t) in &a {
            assert!(t.bit_eq(&b[name]), "param {name}");
        }
    }

    #[test]
    fn resume_from_epoch_boundary_matches_uninterrupted() {
        let asm = tiny_assembly(2);
        let cfg = tiny_cfg(4);
        // uninterrupted
        let mut m1 = SegModel::for_pretraining(Arch::standard(2, 4, 2), 11);
        let mut o1 = AdamW::new(1e-5);
        let r1 = pretrain(&asm, &mut m1, &mut o1, &cfg, 0).unwrap();
        // interrupted after 2 epochs, then resumed
        let mut m2 = SegModel::for_pretraining(Arch::standard(2, 4, 2), 11);
        let mut o2 = AdamW::new(1e-5);
        let mut cfg_head = cfg.clone();
        cfg_head.epochs = 2;
        pretrain(&asm, &mut m2, &mut o2, &cfg_head, 0).unwrap();
        let r2 = pretrain(&asm, &mut m2, &mut o2, &cfg, 2).unwrap();
        let (a, b) = (m1.param_snapshot(), m2.param_snapshot());
        for (name, t) in &a {
            assert!(t.bit_eq(&b[name]), "param {name}");
        }
        // lr schedule positions line up
        assert_eq!(r1.epoch_logs[2].lr, r2.epoch_logs[0].lr);
        assert_eq!(r1.epoch_logs[2].epoch, r2.epoch_logs[0].epoch);
    }

    #[test]
    fn nan_in_parameters_aborts_with_diagnostics() {
        let asm = tiny_assembly(1);
        let mut model = SegModel::for_pretraining(Arch::standard(2, 4, 2), 11);
        {
            let mut named = Vec::new();
            model.named_params_mut(&mut named);
            for (name, t) in named {
                if name == "head.bias" {
                    t.data_mut()[0] = f64::NAN;
                }
            }
        }
        let mut opt = AdamW::new(0.0);
        let err = pretrain(&asm, &mut model, &mut opt, &tiny_cfg(1), 0).unwrap_err();
        match err {
            Error::NonFiniteLoss { epoch, lr, batch } => {
                assert_eq!(epoch, 0);
                assert!(lr > 0.0);
                assert!(!batch.is_empty());
            }
            other => panic!("expected NonFiniteLoss, got {other}"),
        }
    }
}
