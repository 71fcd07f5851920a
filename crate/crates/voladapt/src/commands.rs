//! Operator entry points behind the CLI subcommands. Every artifact embeds
//! the config hash that produced it; reruns with the same config and seed
//! are byte-identical in single-worker mode.

use crate::config::RunConfig;
use crate::engines::benchmark::{parse_csv, to_csv, CSV_HEADER};
use crate::engines::{pretrain, run_benchmark, AdamW, EvalCell, PretrainConfig};
use crate::error::{Error, Result};
use crate::nets::{load_checkpoint, save_checkpoint, CheckpointMeta, PreprocessInfo, SegModel};
use crate::phantom::{build_assembly, Assembly, AssemblySample};
use crate::rawio;
use crate::report::{line_plot_svg, markdown_table, Series};
use crate::rng::Rng;
use crate::volume::{clip_scale_intensity, AnnotationVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub const CORPUS_MANIFEST_FORMAT: &str = "voladapt-corpus";
pub const RESULTS_MANIFEST_FORMAT: &str = "voladapt-results";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestSample {
    pub volume: String,
    pub labels: String,
    pub annotation: Vec<u8>,
    pub dataset: String,
    pub index_in_dataset: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub n_classes: usize,
    pub classes: Vec<String>,
    pub per_class_annotated: Vec<usize>,
    pub samples: Vec<ManifestSample>,
    pub warnings: Vec<String>,
}

/// Environment fingerprint recorded in result manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvFingerprint {
    pub package_version: String,
    pub os: String,
    pub arch: String,
}

impl EnvFingerprint {
    pub fn capture() -> Self {
        EnvFingerprint {
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultsManifest {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub pretrain_config_hash: String,
    pub seed: u64,
    pub gamma: f64,
    pub lambda: f64,
    pub shots: Vec<usize>,
    pub folds: usize,
    pub organs: Vec<String>,
    pub strategies: Vec<String>,
    pub environment: EnvFingerprint,
    pub timings_seconds: BTreeMap<String, f64>,
    pub errors: BTreeMap<String, String>,
}

fn corpus_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("corpus")
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("checkpoints").join("foundation.ckpt")
}

fn results_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("results")
}

/// Synthesize the pretraining corpus to disk and return its manifest.
pub fn cmd_synth(cfg: &RunConfig) -> Result<CorpusManifest> {
    if cfg.datasets.is_empty() {
        return Err(Error::Config("synth requires at least one [[datasets]] entry".into()));
    }
    let dir = corpus_dir(cfg);
    fs::create_dir_all(&dir)?;
    let organs = cfg.organ_specs();
    let assembly = build_assembly(&cfg.datasets, &organs, cfg.organs.len(), cfg.seed)?;
    let mut samples = Vec::new();
    for (i, s) in assembly.samples.iter().enumerate() {
        let vol_name = format!("sample_{i:04}.vol");
        let seg_name = format!("sample_{i:04}.seg");
        let vol = clip_scale_intensity(&s.volume, cfg.preprocess.clip_lo, cfg.preprocess.clip_hi)?;
        rawio::write_volume(&dir.join(&vol_name), &vol)?;
        rawio::write_mask(&dir.join(&seg_name), &s.labels)?;
        samples.push(ManifestSample {
            volume: vol_name,
            labels: seg_name,
            annotation: s.annotation.0.clone(),
            dataset: s.dataset.clone(),
            index_in_dataset: s.index_in_dataset,
            seed: s.seed,
        });
    }
    let per_class_annotated = (0..cfg.organs.len())
        .map(|c| assembly.samples.iter().filter(|s| s.annotation.is_annotated(c)).count())
        .collect();
    let manifest = CorpusManifest {
        format: CORPUS_MANIFEST_FORMAT.into(),
        version: 1,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        n_classes: cfg.organs.len(),
        classes: cfg.class_names(),
        per_class_annotated,
        samples,
        warnings: assembly.warnings.clone(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Load a corpus previously written by [`cmd_synth`].
pub fn load_corpus(cfg: &RunConfig) -> Result<(Assembly, CorpusManifest)> {
    let dir = corpus_dir(cfg);
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact(format!(
            "corpus manifest {} not found; run `synth` first",
            manifest_path.display()
        )));
    }
    let manifest: CorpusManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    if manifest.format != CORPUS_MANIFEST_FORMAT {
        return Err(Error::Format(format!("unexpected manifest format {:?}", manifest.format)));
    }
    let mut samples = Vec::new();
    for m in &manifest.samples {
        let volume = rawio::read_volume(&dir.join(&m.volume))?;
        let labels = rawio::read_mask(&dir.join(&m.labels))?;
        samples.push(AssemblySample {
            volume,
            labels,
            annotation: AnnotationVector::new(m.annotation.clone())?,
            dataset: m.dataset.clone(),
            index_in_dataset: m.index_in_dataset,
            seed: m.seed,
        });
    }
    Ok((
        Assembly { samples, n_classes: manifest.n_classes, warnings: manifest.warnings.clone() },
        manifest,
    ))
}

fn preprocess_info(cfg: &RunConfig) -> PreprocessInfo {
    PreprocessInfo {
        clip_lo: cfg.preprocess.clip_lo,
        clip_hi: cfg.preprocess.clip_hi,
        target_spacing: cfg.preprocess.target_spacing,
        orientation: cfg.preprocess.orientation.clone(),
    }
}

/// Pretrain the foundation model, checkpointing every epoch; resumable.
/// Returns the checkpoint path and the per-epoch loss curve.
pub fn cmd_pretrain(cfg: &RunConfig, resume: bool) -> Result<(PathBuf, Vec<f64>)> {
    let (assembly, _) = load_corpus(cfg)?;
    let ckpt = checkpoint_path(cfg);
    let log_path = cfg.out_dir.join("logs").join("pretrain.jsonl");
    fs::create_dir_all(log_path.parent().unwrap())?;

    let hash = cfg.hash();
    let (mut model, mut opt, start_epoch, mut curve) = if resume && ckpt.exists() {
        let (model, meta) = load_checkpoint(&ckpt)?;
        if meta.config_hash != hash {
            return Err(Error::Config(format!(
                "checkpoint {} was produced by config {} but the current config hashes to {hash}",
                ckpt.display(),
                meta.config_hash
            )));
        }
        let mut opt = AdamW::new(cfg.pretrain.weight_decay);
        opt.moments = meta.opt_moments.clone();
        opt.step_count = meta.epoch as u64 * steps_per_epoch(&cfg.pretrain, assembly.samples.len());
        (model, opt, meta.epoch, meta.loss_curve.clone())
    } else {
        let model =
            SegModel::for_pretraining(cfg.arch, Rng::new(cfg.seed).split(0x1417).next_u64());
        if !resume {
            fs::write(&log_path, b"")?;
        }
        (model, AdamW::new(cfg.pretrain.weight_decay), 0, Vec::new())
    };

    for epoch in start_epoch..cfg.pretrain.epochs {
        let mut one = cfg.pretrain.clone();
        one.epochs = epoch + 1;
        let report = pretrain(&assembly, &mut model, &mut opt, &one, epoch)?;
        let log = &report.epoch_logs[0];
        curve.push(log.loss);
        let line = serde_json::to_string(log)?;
        use std::io::Write;
        let mut f = fs::OpenOptions::new().create(true).append(true).open(&log_path)?;
        writeln!(f, "{line}")?;
        let meta = CheckpointMeta {
            classes: cfg.class_names(),
            preprocess: Some(preprocess_info(cfg)),
            epoch: epoch + 1,
            config_hash: hash.clone(),
            rng_state: None,
            opt_moments: opt.moments.clone(),
            loss_curve: curve.clone(),
        };
        save_checkpoint(&ckpt, &model, &meta)?;
    }
    Ok((ckpt, curve))
}

fn steps_per_epoch(cfg: &PretrainConfig, n_samples: usize) -> u64 {
    (n_samples.div_ceil(cfg.batch_volumes)) as u64
}

/// Run the benchmark grid against the pretrained checkpoint, writing the
/// results CSV and manifest; resumable per cell. Returns the CSV path and
/// the cells.
pub fn cmd_adapt_eval(cfg: &RunConfig, resume: bool) -> Result<(PathBuf, Vec<EvalCell>)> {
    let ckpt_path = checkpoint_path(cfg);
    if !ckpt_path.exists() {
        return Err(Error::MissingArtifact(format!(
            "checkpoint {} not found; run `pretrain` first",
            ckpt_path.display()
        )));
    }
    let (pretrained, ckpt_meta) = load_checkpoint(&ckpt_path)?;
    let target = cfg
        .target
        .as_ref()
        .ok_or_else(|| Error::Config("adapt-eval requires a [target] dataset".into()))?;
    let rdir = results_dir(cfg);
    fs::create_dir_all(&rdir)?;
    let csv_path = rdir.join("results.csv");
    let existing = if resume && csv_path.exists() {
        parse_csv(&fs::read_to_string(&csv_path)?)?
    } else {
        Vec::new()
    };
    // recover organ class ids for resumed cells from names
    let classes = cfg.class_names();
    let existing: Vec<EvalCell> = existing
        .into_iter()
        .map(|mut c| {
            if let Some(idx) = classes.iter().position(|n| n == &c.organ) {
                c.organ_class = idx;
            }
            c
        })
        .collect();

    let mut bench = cfg.benchmark.clone();
    bench.adapt = cfg.adapt.clone();
    bench.seed = cfg.seed;
    let t0 = std::time::Instant::now();
    let cells = run_benchmark(&pretrained, target, &cfg.organ_specs(), &classes, &bench, &existing)?;
    let total_seconds = t0.elapsed().as_secs_f64();

    fs::write(&csv_path, to_csv(&cells))?;
    let mut timings = BTreeMap::new();
    timings.insert("total".to_string(), total_seconds);
    let errors: BTreeMap<String, String> = cells
        .iter()
        .filter_map(|c| {
            c.error.as_ref().map(|e| {
                (format!("{}/{}/k{}/f{}", c.organ, c.strategy.tag(), c.k, c.fold), e.clone())
            })
        })
        .collect();
    let manifest = ResultsManifest {
        format: RESULTS_MANIFEST_FORMAT.into(),
        version: 1,
        config_hash: cfg.hash(),
        pretrain_config_hash: ckpt_meta.config_hash.clone(),
        seed: cfg.seed,
        gamma: cfg.adapt.gamma,
        lambda: cfg.adapt.lambda,
        shots: bench.shots.clone(),
        folds: bench.folds,
        organs: bench.organs.iter().map(|&o| classes[o].clone()).collect(),
        strategies: bench.strategies.iter().map(|s| s.tag().to_string()).collect(),
        environment: EnvFingerprint::capture(),
        timings_seconds: timings,
        errors,
    };
    fs::write(rdir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok((csv_path, cells))
}

/// One discovered result set.
#[derive(Debug)]
pub struct ResultSet {
    pub dir: PathBuf,
    pub manifest: ResultsManifest,
    pub cells: Vec<EvalCell>,
    pub csv_text: String,
}

fn discover_results(dir: &Path, out: &mut Vec<ResultSet>) -> Result<()> {
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() {
        if let Ok(manifest) = serde_json::from_slice::<ResultsManifest>(&fs::read(&manifest_path)?) {
            if manifest.format == RESULTS_MANIFEST_FORMAT {
                let csv_path = dir.join("results.csv");
                if csv_path.exists() {
                    let csv_text = fs::read_to_string(&csv_path)?;
                    let cells = parse_csv(&csv_text)?;
                    out.push(ResultSet { dir: dir.to_path_buf(), manifest, cells, csv_text });
                }
            }
        }
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for sub in subdirs {
        discover_results(&sub, out)?;
    }
    Ok(())
}

/// Render markdown and SVG reports from archived result CSVs. Refuses to
/// merge result sets with conflicting config hashes unless `force` is set.
pub fn cmd_report(results_root: &Path, force: bool) -> Result<PathBuf> {
    if !results_root.exists() {
        return Err(Error::MissingArtifact(format!("{} does not exist", results_root.display())));
    }
    let mut sets = Vec::new();
    discover_results(results_root, &mut sets)?;
    if sets.is_empty() {
        return Err(Error::MissingArtifact(format!(
            "no result sets found under {}",
            results_root.display()
        )));
    }
    let mut hashes: Vec<&str> = sets.iter().map(|s| s.manifest.config_hash.as_str()).collect();
    hashes.sort();
    hashes.dedup();
    if hashes.len() > 1 && !force {
        return Err(Error::Config(format!(
            "result sets carry {} distinct config hashes ({}); pass --force to merge",
            hashes.len(),
            hashes.join(", ")
        )));
    }

    let report_dir = results_root.join("report");
    fs::create_dir_all(&report_dir)?;
    let mut md = String::from("# Benchmark report\n\n");

    for set in &sets {
        md.push_str(&format!(
            "## {} (config {})\n\ngamma = {}, lambda = {}\n\n",
            set.dir.display(),
            set.manifest.config_hash,
            set.manifest.gamma,
            set.manifest.lambda
        ));
        // verbatim CSV fields so report values string-match the archive
        let rows: Vec<Vec<String>> = set
            .csv_text
            .lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.split(',').map(|f| f.to_string()).collect())
            .collect();
        let header: Vec<&str> = CSV_HEADER.split(',').collect();
        md.push_str(&markdown_table(&header, &rows));
        md.push('\n');
    }

    // DSC-vs-K curves per strategy, averaged over organs/folds/sets
    let mut strategies: Vec<String> = sets
        .iter()
        .flat_map(|s| s.cells.iter().map(|c| c.strategy.tag().to_string()))
        .collect();
    strategies.sort();
    strategies.dedup();
    let mut k_series = Vec::new();
    for tag in &strategies {
        let mut by_k: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for set in &sets {
            for c in &set.cells {
                if c.strategy.tag() == tag && c.dsc.is_finite() {
                    by_k.entry(c.k).or_default().push(c.dsc);
                }
            }
        }
        let points: Vec<(f64, f64)> = by_k
            .iter()
            .map(|(&k, v)| (k as f64, v.iter().sum::<f64>() / v.len() as f64))
            .collect();
        if !points.is_empty() {
            k_series.push(Series { label: tag.clone(), points });
        }
    }
    let k_svg = line_plot_svg("Query DSC vs shots", "K (support shots)", "mean DSC", &k_series, None);
    fs::write(report_dir.join("dsc_vs_k.svg"), &k_svg)?;
    md.push_str("## Plots\n\n- [DSC vs K](dsc_vs_k.svg)\n");

    // gamma ablation across sets (one point per distinct gamma)
    let mut gammas: Vec<f64> = sets.iter().map(|s| s.manifest.gamma).collect();
    gammas.sort_by(f64::total_cmp);
    gammas.dedup();
    if !gammas.is_empty() {
        let mut ti_points = Vec::new();
        let mut base_points = Vec::new();
        for &g in &gammas {
            let ti: Vec<f64> = sets
                .iter()
                .filter(|s| s.manifest.gamma == g)
                .flat_map(|s| s.cells.iter())
                .filter(|c| c.strategy.tag() == "ADAPTER_TI" && c.dsc.is_finite())
                .map(|c| c.dsc)
                .collect();
            if !ti.is_empty() {
                ti_points.push((g, ti.iter().sum::<f64>() / ti.len() as f64));
            }
            let base: Vec<f64> = sets
                .iter()
                .filter(|s| s.manifest.gamma == g)
                .flat_map(|s| s.cells.iter())
                .filter(|c| c.strategy.tag() == "ADAPTER" && c.dsc.is_finite())
                .map(|c| c.dsc)
                .collect();
            if !base.is_empty() {
                base_points.push((g, base.iter().sum::<f64>() / base.len() as f64));
            }
        }
        let mut series = Vec::new();
        if !ti_points.is_empty() {
            series.push(Series { label: "ADAPTER_TI".into(), points: ti_points });
        }
        if !base_points.is_empty() {
            series.push(Series { label: "ADAPTER (no TI)".into(), points: base_points });
        }
        if !series.is_empty() {
            let svg = line_plot_svg(
                "Size-margin ablation",
                "gamma",
                "mean DSC",
                &series,
                Some(&gammas),
            );
            fs::write(report_dir.join("gamma_ablation.svg"), &svg)?;
            md.push_str("- [gamma ablation](gamma_ablation.svg)\n");
        }
    }

    let md_path = report_dir.join("report.md");
    fs::write(&md_path, &md)?;
    Ok(md_path)
}
