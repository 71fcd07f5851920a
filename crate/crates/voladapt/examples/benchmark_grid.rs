//! A miniature benchmark grid: strategies x shots x folds on phantom tasks,
//! with the Table-style summary and the deterministic CSV the CLI also
//! produces.
//!
//! Run with: cargo run --release --example benchmark_grid

use voladapt::desk::desk_organs;
use voladapt::engines::benchmark::to_csv;
use voladapt::engines::{pretrain, run_benchmark, summary_table, AdamW, AdaptConfig, BenchmarkConfig, PretrainConfig};
use voladapt::error::Result;
use voladapt::nets::{Arch, SegModel, TrainStrategy};
use voladapt::phantom::{build_assembly, DatasetSpec};
use voladapt::volume::AnnotationVector;

fn main() -> Result<()> {
    let site = |name: &str, w: Vec<u8>| DatasetSpec {
        name: name.into(),
        n_volumes: 3,
        annotation: AnnotationVector(w),
        grid_shape: [16, 16, 16],
        spacing: [1.5; 3],
        base_intensity: 0.2,
        noise_sigma: 0.05,
        intensity_shift: 0.0,
        intensity_jitter: 0.03,
        radii_scale: 1.0,
    };
    let organs = desk_organs();
    let assembly =
        build_assembly(&[site("a", vec![1, 1, 1]), site("b", vec![1, 1, 0])], &organs, 3, 5)?;
    let mut foundation = SegModel::for_pretraining(Arch::standard(3, 6, 3), 8);
    let mut opt = AdamW::new(1e-5);
    let pcfg = PretrainConfig {
        epochs: 8,
        patches_per_volume: 2,
        batch_volumes: 2,
        base_lr: 3e-3,
        warmup_epochs: 2,
        patch_size: [16, 16, 16],
        seed: 2,
        ..PretrainConfig::default()
    };
    pretrain(&assembly, &mut foundation, &mut opt, &pcfg, 0)?;

    let target = DatasetSpec {
        name: "clinic".into(),
        n_volumes: 1,
        annotation: AnnotationVector(vec![1, 1, 1]),
        grid_shape: [16, 16, 16],
        spacing: [1.5; 3],
        base_intensity: 0.2,
        noise_sigma: 0.07,
        intensity_shift: -0.15,
        intensity_jitter: 0.05,
        radii_scale: 1.0,
    };
    let bench = BenchmarkConfig {
        strategies: vec![
            TrainStrategy::Generalization,
            TrainStrategy::LinearProbe,
            TrainStrategy::Adapter,
        ],
        shots: vec![1, 3],
        folds: 2,
        organs: vec![0, 1],
        adapt: AdaptConfig {
            epochs: 8,
            ti_start_epoch: 4,
            base_lr: 0.08,
            patches_per_volume: 2,
            patch_size: [16, 16, 16],
            sw_overlap: 0.0,
            ..AdaptConfig::default()
        },
        eval_overlap: 0.0,
        threshold: 0.5,
        record_timing: false,
        seed: 33,
        workers: 1,
    };
    let classes: Vec<String> = vec!["round_organ".into(), "small_organ".into(), "bright_organ".into()];
    let cells = run_benchmark(&foundation, &target, &organs, &classes, &bench, &[])?;
    print!("{}", summary_table(&cells));
    println!("CSV ({} rows):", cells.len());
    print!("{}", to_csv(&cells));
    Ok(())
}
