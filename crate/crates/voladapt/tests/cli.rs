//! End-to-end tests of the CLI subcommands: artifact layout, exit codes,
//! interrupt-resume, and report generation.

use std::path::{Path, PathBuf};
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_voladapt");

fn tmp(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let base = r#"
version = 1
seed = 77
out_dir = "OUTDIR"

[arch]
base_width = 2
bottleneck_width = 8
feature_dim = 4
n_classes = 2

[[organs]]
name = "round_organ"
center_range = [[0.3, 0.4], [0.4, 0.6], [0.4, 0.6]]
radii_range = [[0.14, 0.2], [0.14, 0.2], [0.14, 0.2]]
intensity_mean = 0.75
intensity_sigma = 0.03
allow_overlap = true

[[organs]]
name = "small_organ"
center_range = [[0.65, 0.75], [0.4, 0.6], [0.4, 0.6]]
radii_range = [[0.1, 0.15], [0.1, 0.15], [0.1, 0.15]]
intensity_mean = 0.5
intensity_sigma = 0.03
allow_overlap = true

[[datasets]]
name = "site_a"
n_volumes = 2
annotation = [1, 0]
grid_shape = [16, 16, 16]
spacing = [1.5, 1.5, 1.5]

[[datasets]]
name = "site_b"
n_volumes = 2
annotation = [0, 1]
grid_shape = [16, 16, 16]
spacing = [1.5, 1.5, 1.5]

[target]
name = "clinic"
n_volumes = 1
annotation = [1, 1]
grid_shape = [16, 16, 16]
spacing = [1.5, 1.5, 1.5]
intensity_shift = -0.1

[pretrain]
epochs = 6
patches_per_volume = 1
batch_volumes = 2
base_lr = 0.003
warmup_epochs = 1
patch_size = [8, 8, 8]

[adapt]
epochs = 3
ti_start_epoch = 2
base_lr = 0.05
patches_per_volume = 1
patch_size = [8, 8, 8]
sw_overlap = 0.0

[benchmark]
strategies = ["GENERALIZATION", "ADAPTER"]
shots = [1]
folds = 1
organs = [0, 1]
eval_overlap = 0.0
"#;
    let out = dir.join("run");
    let text = base.replace("OUTDIR", out.to_str().unwrap()) + extra;
    let path = dir.join("cfg.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(BIN).args(args).output().expect("spawn voladapt");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).to_string(),
        String::from_utf8_lossy(&out.stderr).to_string(),
    )
}

#[test]
fn missing_config_exits_2() {
    let (code, _, err) = run(&["synth", "--config", "/nonexistent/cfg.toml"]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("error:"), "a summary line, not a raw stack trace: {err}");
}

#[test]
fn pretrain_without_corpus_exits_2() {
    let dir = tmp("no-corpus");
    let cfg = write_config(&dir, "");
    let (code, _, err) = run(&["pretrain", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("synth"), "points the operator at the missing step: {err}");
}

#[test]
fn adapt_eval_without_checkpoint_exits_2() {
    let dir = tmp("no-ckpt");
    let cfg = write_config(&dir, "");
    let (code, _, _) = run(&["synth", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 0);
    let (code, _, err) = run(&["adapt-eval", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn unknown_strategy_exits_2_listing_tags() {
    let dir = tmp("bad-strategy");
    let cfg = write_config(&dir, "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("\"ADAPTER\"", "\"TURBO\"");
    std::fs::write(&cfg, text).unwrap();
    let (code, _, err) = run(&["synth", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("ADAPTER_TI") || err.contains("expected one of"), "lists valid tags: {err}");
}

#[test]
fn synth_rerun_identical_manifest() {
    let dir = tmp("synth-determinism");
    let cfg = write_config(&dir, "");
    let (code, _, _) = run(&["synth", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 0);
    let manifest = dir.join("run/corpus/manifest.json");
    let first = std::fs::read(&manifest).unwrap();
    let (code, _, _) = run(&["synth", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_eq!(first, std::fs::read(&manifest).unwrap());
}

#[test]
fn pretrain_interrupt_and_resume_matches_uninterrupted() {
    let dir = tmp("resume");
    let cfg = write_config(&dir, "");
    assert_eq!(run(&["synth", "--config", cfg.to_str().unwrap()]).0, 0);

    // uninterrupted reference in a separate out dir (with its own corpus)
    let ref_out = dir.join("ref");
    assert_eq!(
        run(&["synth", "--config", cfg.to_str().unwrap(), "--out", ref_out.to_str().unwrap()]).0,
        0
    );
    assert_eq!(
        run(&["pretrain", "--config", cfg.to_str().unwrap(), "--out", ref_out.to_str().unwrap()]).0,
        0
    );

    // interrupted run: kill the process once a mid-training checkpoint exists
    let ckpt = dir.join("run/checkpoints/foundation.ckpt");
    let mut child = Command::new(BIN)
        .args(["pretrain", "--config", cfg.to_str().unwrap()])
        .spawn()
        .unwrap();
    for _ in 0..600 {
        std::thread::sleep(std::time::Duration::from_millis(10));
        if ckpt.exists() {
            if let Ok((_, meta)) = voladapt::nets::load_checkpoint(&ckpt) {
                if meta.epoch >= 2 {
                    break;
                }
            }
        }
        if child.try_wait().unwrap().is_some() {
            break; // finished before we could interrupt; resume is then a no-op
        }
    }
    let _ = child.kill();
    let _ = child.wait();

    let (code, _, err) = run(&["pretrain", "--config", cfg.to_str().unwrap(), "--resume"]);
    assert_eq!(code, 0, "{err}");
    let resumed = std::fs::read(&ckpt).unwrap();
    let reference = std::fs::read(ref_out.join("checkpoints/foundation.ckpt")).unwrap();
    assert_eq!(resumed, reference, "resumed checkpoint differs from the uninterrupted run");
    // epoch log has one JSON line per epoch
    let log = std::fs::read_to_string(dir.join("run/logs/pretrain.jsonl")).unwrap();
    let epochs: Vec<usize> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["epoch"].as_u64().unwrap() as usize)
        .collect();
    assert_eq!(*epochs.last().unwrap(), 5, "lr schedule position after resume");
}

#[test]
fn full_pipeline_summary_and_report() {
    let dir = tmp("pipeline");
    let cfg = write_config(&dir, "");
    for sub in ["synth", "pretrain", "adapt-eval"] {
        let (code, _, err) = run(&[sub, "--config", cfg.to_str().unwrap()]);
        assert_eq!(code, 0, "{sub}: {err}");
    }
    // Avg column equals the arithmetic mean of the organ columns: recompute
    // independently from the archived CSV
    let csv_text = std::fs::read_to_string(dir.join("run/results/results.csv")).unwrap();
    let cells = voladapt::engines::benchmark::parse_csv(&csv_text).unwrap();
    let rows = voladapt::engines::benchmark::summary_rows(&cells);
    let mut checked_rows = 0;
    for row in &rows {
        let means: Vec<f64> = row.organ_means.iter().filter_map(|(_, m)| *m).collect();
        if means.is_empty() {
            continue;
        }
        let recomputed = means.iter().sum::<f64>() / means.len() as f64;
        let avg = row.avg.expect("avg present when organ means exist");
        assert!((recomputed - avg).abs() <= 1e-9, "{} k={}", row.strategy, row.k);
        checked_rows += 1;
    }
    assert!(checked_rows >= 2, "summary rows checked: {checked_rows}");

    // report renders; markdown carries the CSV fields verbatim
    let results = dir.join("run/results");
    let (code, _, err) = run(&["report", "--results", results.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let md = std::fs::read_to_string(results.join("report/report.md")).unwrap();
    let csv = std::fs::read_to_string(results.join("results.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let row = format!("| {} |", line.split(',').collect::<Vec<_>>().join(" | "));
        assert!(md.contains(&row), "markdown must contain CSV row verbatim: {row}");
    }
    assert!(results.join("report/dsc_vs_k.svg").exists());
}

#[test]
fn report_empty_dir_exits_2_and_hash_conflicts_require_force() {
    let dir = tmp("report-edge");
    let empty = dir.join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let (code, _, _) = run(&["report", "--results", empty.to_str().unwrap()]);
    assert_eq!(code, 2);

    // two result sets from different configs (different seeds -> hashes)
    let merged = dir.join("merged");
    std::fs::create_dir_all(&merged).unwrap();
    for (sub, seed) in [("x", "31"), ("y", "32")] {
        let cfg = write_config(&dir, "");
        let out = merged.join(sub);
        for step in ["synth", "pretrain", "adapt-eval"] {
            let (code, _, err) = run(&[
                step,
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--seed",
                seed,
            ]);
            assert_eq!(code, 0, "{step}: {err}");
        }
    }
    let (code, _, err) = run(&["report", "--results", merged.to_str().unwrap()]);
    assert_eq!(code, 2, "conflicting hashes must be refused: {err}");
    assert!(err.contains("--force"), "{err}");
    let (code, _, err) = run(&["report", "--results", merged.to_str().unwrap(), "--force"]);
    assert_eq!(code, 0, "{err}");
}

#[test]
fn synth_manifest_tallies_match_recount() {
    let dir = tmp("tallies");
    let cfg = write_config(&dir, "");
    assert_eq!(run(&["synth", "--config", cfg.to_str().unwrap()]).0, 0);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("run/corpus/manifest.json")).unwrap()).unwrap();
    let samples = manifest["samples"].as_array().unwrap();
    let tallies = manifest["per_class_annotated"].as_array().unwrap();
    for (c, tally) in tallies.iter().enumerate() {
        let recount = samples
            .iter()
            .filter(|s| s["annotation"][c].as_u64() == Some(1))
            .count() as u64;
        assert_eq!(tally.as_u64().unwrap(), recount, "class {c}");
    }
    // every sample's annotation matches its source site
    for s in samples {
        let w: Vec<u64> = s["annotation"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
        match s["dataset"].as_str().unwrap() {
            "site_a" => assert_eq!(w, vec![1, 0]),
            "site_b" => assert_eq!(w, vec![0, 1]),
            other => panic!("unexpected dataset {other}"),
        }
    }
}

#[test]
fn gamma_sweep_report_has_one_tick_per_gamma() {
    let dir = tmp("gamma-sweep");
    let sweep = dir.join("sweep");
    std::fs::create_dir_all(&sweep).unwrap();
    for gamma in ["0.05", "0.2", "0.5"] {
        let cfg = write_config(&dir, "\n# sweep\n");
        let text = std::fs::read_to_string(&cfg)
            .unwrap()
            .replace("[adapt]", &format!("[adapt]\ngamma = {gamma}"))
            .replace(
                "strategies = [\"GENERALIZATION\", \"ADAPTER\"]",
                "strategies = [\"ADAPTER\", \"ADAPTER_TI\"]",
            );
        std::fs::write(&cfg, text).unwrap();
        let out = sweep.join(format!("gamma_{gamma}"));
        for step in ["synth", "pretrain", "adapt-eval"] {
            let (code, _, err) =
                run(&[step, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
            assert_eq!(code, 0, "{step} at gamma {gamma}: {err}");
        }
    }
    // distinct gammas mean distinct hashes, so merging requires --force
    let (code, _, _) = run(&["report", "--results", sweep.to_str().unwrap()]);
    assert_eq!(code, 2);
    let (code, _, err) = run(&["report", "--results", sweep.to_str().unwrap(), "--force"]);
    assert_eq!(code, 0, "{err}");
    let svg = std::fs::read_to_string(sweep.join("report/gamma_ablation.svg")).unwrap();
    assert_eq!(svg.matches("class=\"xtick\"").count(), 3, "one tick per gamma value");
}

#[test]
fn workers_flag_does_not_change_results() {
    let dir = tmp("workers");
    let cfg = write_config(&dir, "");
    for sub in ["synth", "pretrain"] {
        assert_eq!(run(&[sub, "--config", cfg.to_str().unwrap()]).0, 0);
    }
    let (code, _, _) = run(&["adapt-eval", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 0);
    let csv1 = std::fs::read(dir.join("run/results/results.csv")).unwrap();
    std::fs::remove_dir_all(dir.join("run/results")).unwrap();
    let (code, _, _) = run(&["adapt-eval", "--config", cfg.to_str().unwrap(), "--workers", "3"]);
    assert_eq!(code, 0);
    let csv2 = std::fs::read(dir.join("run/results/results.csv")).unwrap();
    assert_eq!(csv1, csv2, "worker count must not affect results");
}
