//! Desk-scale presets: a compact phantom world and training settings sized
//! for a single CPU core. These presets back the runnable examples, the
//! shipped configs, and the acceptance suite; the full-scale protocol values
//! stay reachable through ordinary config files.

use crate::engines::{AdaptConfig, PretrainConfig};
use crate::nets::{Arch, SegModel, TrainStrategy};
use crate::phantom::{DatasetSpec, OrganSpec};
use crate::volume::AnnotationVector;

/// Global class count of the desk world.
pub const DESK_CLASSES: usize = 3;

pub fn desk_class_names() -> Vec<String> {
    vec!["round_organ".into(), "small_organ".into(), "bright_organ".into()]
}

/// Three ellipsoid organ classes with distinct locations and intensities.
/// Placement boxes are separated, but overlap stays allowed so that every
/// seed yields a valid phantom; on rare contact the later class paints over
/// the earlier one while each label channel keeps its exact ellipsoid.
pub fn desk_organs() -> Vec<OrganSpec> {
    vec![
        OrganSpec {
            class_id: 0,
            center_range: [(0.30, 0.40), (0.38, 0.50), (0.38, 0.50)],
            radii_range: [(0.16, 0.19); 3],
            intensity_mean: 0.72,
            intensity_sigma: 0.04,
            allow_overlap: true,
        },
        OrganSpec {
            class_id: 1,
            center_range: [(0.70, 0.78), (0.42, 0.55), (0.55, 0.66)],
            radii_range: [(0.10, 0.14); 3],
            intensity_mean: 0.48,
            intensity_sigma: 0.04,
            allow_overlap: true,
        },
        OrganSpec {
            class_id: 2,
            center_range: [(0.48, 0.58), (0.68, 0.76), (0.38, 0.50)],
            radii_range: [(0.08, 0.11); 3],
            intensity_mean: 0.92,
            intensity_sigma: 0.03,
            allow_overlap: true,
        },
    ]
}

/// The pretraining assembly: three "sites" with different partial annotation
/// vectors, exercising the masked loss.
pub fn desk_datasets(volumes_per_site: usize) -> Vec<DatasetSpec> {
    let mk = |name: &str, w: Vec<u8>| DatasetSpec {
        name: name.into(),
        n_volumes: volumes_per_site,
        annotation: AnnotationVector(w),
        grid_shape: [32, 32, 32],
        spacing: [1.5; 3],
        base_intensity: 0.2,
        noise_sigma: 0.05,
        intensity_shift: 0.0,
        intensity_jitter: 0.05,
        radii_scale: 1.0,
    };
    vec![
        mk("site_a", vec![1, 1, 0]),
        mk("site_b", vec![1, 0, 1]),
        mk("site_c", vec![0, 1, 1]),
    ]
}

/// Domain-shift flavor of the target institution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetShift {
    /// Same distribution as pretraining.
    None,
    /// Organ contrast dropped toward the noise floor with strong per-volume
    /// contrast variation. One noisy support volume badly underdetermines
    /// the decision boundary, which is what breaks full fine-tuning in the
    /// 1-shot regime.
    LowContrast,
    /// The background rises toward organ intensity, so adapted models pick
    /// up clutter and halo: the predicted soft size systematically exceeds
    /// the true organ size, which is what the size constraint corrects.
    OverSegmenting,
}

/// The few-shot target institution.
pub fn desk_target(shift: TargetShift) -> DatasetSpec {
    let (base, intensity_shift, noise, jitter) = match shift {
        TargetShift::None => (0.2, 0.0, 0.05, 0.05),
        TargetShift::LowContrast => (0.2, -0.34, 0.15, 0.12),
        TargetShift::OverSegmenting => (0.34, -0.28, 0.13, 0.08),
    };
    DatasetSpec {
        name: "target_clinic".into(),
        n_volumes: 1,
        annotation: AnnotationVector(vec![1, 1, 1]),
        grid_shape: [32, 32, 32],
        spacing: [1.5; 3],
        base_intensity: base,
        noise_sigma: noise,
        intensity_shift,
        intensity_jitter: jitter,
        radii_scale: 1.0,
    }
}

/// Compact backbone for training-heavy runs on one core.
pub fn desk_arch() -> Arch {
    Arch { base_width: 6, bottleneck_width: 24, feature_dim: 12, n_classes: DESK_CLASSES }
}

/// Parameter-accounting architecture: D = 48 features as in the full-scale
/// head, with a bottleneck wide enough that full fine-tuning updates two
/// orders of magnitude more scalars than the adapter. Used for counting,
/// never for desk training.
pub fn counting_arch() -> Arch {
    Arch { base_width: 8, bottleneck_width: 840, feature_dim: 48, n_classes: 9 }
}

pub fn desk_pretrain_config() -> PretrainConfig {
    PretrainConfig {
        epochs: 20,
        patches_per_volume: 2,
        batch_volumes: 2,
        base_lr: 3e-3,
        warmup_epochs: 3,
        weight_decay: 1e-5,
        patch_size: [32, 32, 32],
        augment_intensity: true,
        augment_rot90: true,
        intensity_shift_magnitude: 0.08,
        seed: 17,
    }
}

/// Strategy-appropriate adaptation settings at desk scale. Learning rates
/// scale the full-protocol values to the shorter desk schedule so the
/// cumulative update magnitude is comparable.
pub fn desk_adapt_config(strategy: TrainStrategy, shots: usize, seed: u64) -> AdaptConfig {
    let base_lr = match strategy {
        TrainStrategy::Adapter | TrainStrategy::AdapterTi => 0.08,
        TrainStrategy::LinearProbe => 0.5,
        TrainStrategy::Ft | TrainStrategy::Scratch => 3e-3,
        TrainStrategy::FtLast => 3e-3,
        TrainStrategy::Generalization => 0.0,
    };
    AdaptConfig {
        strategy,
        shots,
        epochs: 20,
        base_lr,
        warmup_epochs: 0,
        ti_start_epoch: 10,
        gamma: 0.2,
        lambda: 1.0,
        patches_per_volume: 2,
        patch_size: [32, 32, 32],
        support_loss: crate::objectives::SupportLoss::Dice,
        weight_decay: 0.0,
        sw_overlap: 0.25,
        seed,
    }
}

/// Build the desk pretraining assembly and train a foundation model from
/// scratch. Deterministic in `seed`.
pub fn desk_pretrained(volumes_per_site: usize, epochs: usize, seed: u64) -> crate::error::Result<(SegModel, Vec<f64>)> {
    let assembly = crate::phantom::build_assembly(
        &desk_datasets(volumes_per_site),
        &desk_organs(),
        DESK_CLASSES,
        seed,
    )?;
    let mut model = SegModel::for_pretraining(desk_arch(), seed ^ 0x5EED);
    let mut opt = crate::engines::AdamW::new(1e-5);
    let mut cfg = desk_pretrain_config();
    cfg.epochs = epochs;
    cfg.seed = seed;
    let report = crate::engines::pretrain(&assembly, &mut model, &mut opt, &cfg, 0)?;
    Ok((model, report.epoch_logs.iter().map(|l| l.loss).collect()))
}
