// temporary calibration driver, removed before shipping
use std::time::Instant;
use voladapt::desk::*;
use voladapt::engines::*;
use voladapt::nets::TrainStrategy;
use voladapt::phantom::build_fewshot_task;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let stage = args.get(1).map(|s| s.as_str()).unwrap_or("pretrain");
    match stage {
        "pretrain" => {
            let t0 = Instant::now();
            let (model, curve) = desk_pretrained(8, 20, 42).unwrap();
            println!("pretrain 24 vols x 20 epochs: {:.1}s", t0.elapsed().as_secs_f64());
            println!("loss curve: {:?}", curve.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>());
            // eval generalization on target tasks
            let organs = desk_organs();
            for shift in [TargetShift::None, TargetShift::OverSegmenting] {
                let target = desk_target(shift);
                let mut dscs = vec![];
                for fold in 0..3u64 {
                    let task = build_fewshot_task(&target, &organs, DESK_CLASSES, 0, 1, 1000 + fold).unwrap();
                    let mut m = voladapt::engines::adapt::assemble_for_task(&model, TrainStrategy::Generalization, 0, 1).unwrap();
                    let probs = sliding_window_predict(&mut m, &task.query, [32;3], 0.25).unwrap();
                    let pred = binarize_and_largest_cc(&probs, 0.5).unwrap();
                    let d = dice_score(&pred, task.eval_ground_truth().for_evaluation()).unwrap();
                    dscs.push(d);
                }
                println!("GENERALIZATION {shift:?}: {dscs:?}");
            }
            // save for later stages
            voladapt::nets::save_checkpoint(std::path::Path::new("/tmp/calib.ckpt"), &model, &Default::default()).unwrap();
        }
        "adapt" => {
            let (model, _) = voladapt::nets::load_checkpoint(std::path::Path::new("/tmp/calib.ckpt")).unwrap();
            let organs = desk_organs();
            let target = desk_target(TargetShift::LowContrast);
            for strategy in [TrainStrategy::Ft, TrainStrategy::Adapter, TrainStrategy::LinearProbe] {
                let t0 = Instant::now();
                let mut dscs = vec![];
                for fold in 0..3u64 {
                    let task = build_fewshot_task(&target, &organs, DESK_CLASSES, 0, 1, 2000 + fold).unwrap();
                    let cfg = desk_adapt_config(strategy, 1, 77 + fold);
                    let (mut m, rep) = adapt(&model, &task, &cfg).unwrap();
                    let probs = sliding_window_predict(&mut m, &task.query, [32;3], 0.25).unwrap();
                    let pred = binarize_and_largest_cc(&probs, 0.5).unwrap();
                    let d = dice_score(&pred, task.eval_ground_truth().for_evaluation()).unwrap();
                    dscs.push((d * 1000.0).round() / 1000.0);
                    if fold == 0 {
                        println!("  {strategy} support loss {:.3} -> {:.3}", rep.first_support_loss().unwrap(), rep.final_support_loss().unwrap());
                    }
                }
                println!("{strategy} K=1 shifted: {dscs:?} ({:.1}s for 3 runs)", t0.elapsed().as_secs_f64());
            }
        }
        "ti" => {
            let (model, _) = voladapt::nets::load_checkpoint(std::path::Path::new("/tmp/calib.ckpt")).unwrap();
            let organs = desk_organs();
            for shift in [TargetShift::OverSegmenting, TargetShift::None] {
                let target = desk_target(shift);
                for strategy in [TrainStrategy::Adapter, TrainStrategy::AdapterTi] {
                    let t0 = Instant::now();
                    let mut dscs = vec![];
                    let mut s_ratio = vec![];
                    for fold in 0..3u64 {
                        let task = build_fewshot_task(&target, &organs, DESK_CLASSES, 0, 5, 3000 + fold).unwrap();
                        let cfg = desk_adapt_config(strategy, 5, 88 + fold);
                        let (mut m, rep) = adapt(&model, &task, &cfg).unwrap();
                        let probs = sliding_window_predict(&mut m, &task.query, [32;3], 0.25).unwrap();
                        let pred = binarize_and_largest_cc(&probs, 0.5).unwrap();
                        let d = dice_score(&pred, task.eval_ground_truth().for_evaluation()).unwrap();
                        dscs.push((d * 1000.0).round() / 1000.0);
                        // measure over/under-segmentation: predicted size vs true size
                        let s_pred = pred.foreground_count(0);
                        let s_true = task.eval_ground_truth().for_evaluation().foreground_count(0);
                        s_ratio.push(((s_pred / s_true) * 100.0).round() / 100.0);
                        let _ = &rep;
                    }
                    println!("{strategy} K=5 {shift:?}: dsc {dscs:?} size_ratio {s_ratio:?} ({:.0}s/3runs)", t0.elapsed().as_secs_f64());
                }
            }
        }
        "crit8" => {
            let (model, _) = voladapt::nets::load_checkpoint(std::path::Path::new("/tmp/calib.ckpt")).unwrap();
            let organs = desk_organs();
            let n_folds: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2);
            for shift in [TargetShift::OverSegmenting, TargetShift::None] {
                let target = desk_target(shift);
                let mut gains = vec![];
                for fold in 0..n_folds {
                    let task = build_fewshot_task(&target, &organs, DESK_CLASSES, 0, 5, 8000 + fold).unwrap();
                    let s_true = task.eval_ground_truth().for_evaluation().foreground_count(0);
                    let mut dscs = vec![];
                    for strategy in [TrainStrategy::Adapter, TrainStrategy::AdapterTi] {
                        let cfg = desk_adapt_config(strategy, 5, 600 + fold);
                        let (mut m, rep) = adapt(&model, &task, &cfg).unwrap();
                        let probs = sliding_window_predict(&mut m, &task.query, [32;3], 0.25).unwrap();
                        let soft = probs.sum();
                        let pred = binarize_and_largest_cc(&probs, 0.5).unwrap();
                        let hard = pred.foreground_count(0);
                        let d = dice_score(&pred, task.eval_ground_truth().for_evaluation()).unwrap();
                        dscs.push(d);
                        if strategy == TrainStrategy::AdapterTi {
                            let prior = rep.prior.unwrap();
                            let band = (0.8 * prior.voxels, 1.2 * prior.voxels);
                            let tr: Vec<f64> = rep.s_hat_trace.iter().map(|(_, v)| (v*10.0).round()/10.0).collect();
                            println!("  fold {fold}: prior {:.0} band [{:.0},{:.0}] true {s_true:.0} soft {soft:.0} hard {hard:.0} s_hat {:?}", prior.voxels, band.0, band.1, tr);
                        }
                    }
                    println!("  fold {fold} {shift:?}: ADAPTER {:.3} ADAPTER_TI {:.3}", dscs[0], dscs[1]);
                    gains.push(dscs[1] - dscs[0]);
                }
                let mean = gains.iter().sum::<f64>() / gains.len() as f64;
                println!("{shift:?}: mean TI gain {mean:+.4}");
            }
        }
        "crit7" => {
            let (model, _) = voladapt::nets::load_checkpoint(std::path::Path::new("/tmp/calib.ckpt")).unwrap();
            let organs = desk_organs();
            let target = desk_target(TargetShift::LowContrast);
            let n_tasks: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(5);
            let n_seeds: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2);
            let t0 = Instant::now();
            let mut means = std::collections::BTreeMap::new();
            for strategy in [TrainStrategy::Ft, TrainStrategy::Adapter] {
                let mut all = vec![];
                for task_id in 0..n_tasks {
                    let task = build_fewshot_task(&target, &organs, DESK_CLASSES, 0, 1, 7000 + task_id).unwrap();
                    for seed in 0..n_seeds {
                        let cfg = desk_adapt_config(strategy, 1, 500 + task_id * 31 + seed);
                        let (mut m, _) = adapt(&model, &task, &cfg).unwrap();
                        let probs = sliding_window_predict(&mut m, &task.query, [32;3], 0.25).unwrap();
                        let pred = binarize_and_largest_cc(&probs, 0.5).unwrap();
                        let d = dice_score(&pred, task.eval_ground_truth().for_evaluation()).unwrap();
                        all.push(d);
                    }
                }
                let mean = all.iter().sum::<f64>() / all.len() as f64;
                println!("{strategy}: mean {mean:.3} over {} runs: {:?}", all.len(), all.iter().map(|v| (v*100.0).round()/100.0).collect::<Vec<_>>());
                means.insert(strategy.tag(), mean);
            }
            println!("gap = {:.3} ({:.0}s total)", means["ADAPTER"] - means["FT"], t0.elapsed().as_secs_f64());
        }
        _ => panic!("unknown stage"),
    }
}
