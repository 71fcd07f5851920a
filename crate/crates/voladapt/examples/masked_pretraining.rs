//! Foundation-model pretraining with masked backpropagation of partial
//! labels: per-sample losses cover only the classes the source site
//! annotates, so head rows of never-annotated classes stay untouched.
//!
//! Run with: cargo run --release --example masked_pretraining

use voladapt::desk::desk_organs;
use voladapt::engines::{pretrain, AdamW, PretrainConfig};
use voladapt::error::Result;
use voladapt::nets::{Arch, SegModel};
use voladapt::phantom::{build_assembly, DatasetSpec};
use voladapt::volume::AnnotationVector;

fn main() -> Result<()> {
    // two sites; class 2 is annotated nowhere
    let mk = |name: &str, w: Vec<u8>| DatasetSpec {
        name: name.into(),
        n_volumes: 3,
        annotation: AnnotationVector(w),
        grid_shape: [16, 16, 16],
        spacing: [1.5; 3],
        base_intensity: 0.2,
        noise_sigma: 0.05,
        intensity_shift: 0.0,
        intensity_jitter: 0.0,
        radii_scale: 1.0,
    };
    let datasets = vec![mk("site_a", vec![1, 0, 0]), mk("site_b", vec![0, 1, 0])];
    let assembly = build_assembly(&datasets, &desk_organs(), 3, 11)?;

    let mut model = SegModel::for_pretraining(Arch::standard(3, 6, 3), 5);
    let before = model.param_snapshot();
    let mut opt = AdamW::new(1e-5);
    let cfg = PretrainConfig {
        epochs: 10,
        patches_per_volume: 2,
        batch_volumes: 2,
        base_lr: 8e-3,
        warmup_epochs: 1,
        patch_size: [16, 16, 16],
        seed: 3,
        ..PretrainConfig::default()
    };
    let report = pretrain(&assembly, &mut model, &mut opt, &cfg, 0)?;
    for log in &report.epoch_logs {
        println!("epoch {:>2}: lr {:.2e}  masked dice loss {:.4}", log.epoch, log.lr, log.loss);
    }

    // the class-2 head row never received gradient
    let after = model.param_snapshot();
    let (wb, wa) = (&before["head.weight"], &after["head.weight"]);
    let d = wb.shape()[1];
    let class2_moved = (0..d).any(|i| wb.data()[2 * d + i] != wa.data()[2 * d + i]);
    println!("class-2 head weights moved: {class2_moved} (never annotated, so they must not)");
    assert!(!class2_moved);
    let class0_moved = (0..d).any(|i| wb.data()[i] != wa.data()[i]);
    assert!(class0_moved, "annotated classes do train");
    Ok(())
}
