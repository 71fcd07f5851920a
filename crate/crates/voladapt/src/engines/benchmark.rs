//! Benchmark runner: the full (strategy x shots x fold x organ) grid with
//! deterministic per-cell seeding, resumable results, and a Table-style
//! summary.

use crate::engines::adapt::{adapt, AdaptConfig};
use crate::engines::infer::sliding_window_predict;
use crate::engines::metrics::dice_score;
use crate::engines::postproc::binarize_and_largest_cc;
use crate::error::{Error, Result};
use crate::nets::{SegModel, TrainStrategy};
use crate::phantom::{build_fewshot_task, DatasetSpec, OrganSpec};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub strategies: Vec<TrainStrategy>,
    pub shots: Vec<usize>,
    pub folds: usize,
    /// Target organ class ids.
    pub organs: Vec<usize>,
    /// Template adaptation settings; strategy, shots, and seed are set per cell.
    pub adapt: AdaptConfig,
    pub eval_overlap: f64,
    pub threshold: f64,
    /// When false, the CSV seconds column reads 0.000 so result files are
    /// byte-identical across reruns; wall-clock always goes to the manifest.
    pub record_timing: bool,
    pub seed: u64,
    pub workers: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            strategies: vec![TrainStrategy::Adapter],
            shots: vec![1],
            folds: 1,
            organs: vec![0],
            adapt: AdaptConfig::default(),
            eval_overlap: 0.25,
            threshold: 0.5,
            record_timing: false,
            seed: 101,
            workers: 1,
        }
    }
}

/// One benchmark cell result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalCell {
    pub organ: String,
    pub organ_class: usize,
    pub strategy: TrainStrategy,
    pub k: usize,
    pub fold: usize,
    pub dsc: f64,
    pub n_trainable: usize,
    pub seconds: f64,
    /// Populated when the cell failed; `dsc` is NaN in that case.
    pub error: Option<String>,
}

impl EvalCell {
    pub fn key(&self) -> (usize, String, usize, usize) {
        (self.organ_class, self.strategy.tag().to_string(), self.k, self.fold)
    }
}

pub const CSV_HEADER: &str = "organ,strategy,k,fold,dsc,n_trainable,seconds";

pub fn to_csv(cells: &[EvalCell]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{},{:.3}\n",
            c.organ,
            c.strategy.tag(),
            c.k,
            c.fold,
            c.dsc,
            c.n_trainable,
            c.seconds
        ));
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<EvalCell>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty results CSV".into()))?;
    if header != CSV_HEADER {
        return Err(Error::Format(format!("unexpected CSV header {header:?}")));
    }
    let mut cells = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::Format(format!("CSV line {} has {} fields", i + 2, f.len())));
        }
        let parse_err = |what: &str| Error::Format(format!("CSV line {}: bad {what}", i + 2));
        cells.push(EvalCell {
            organ: f[0].to_string(),
            organ_class: usize::MAX, // recovered below if the name encodes it
            strategy: TrainStrategy::parse(f[1])?,
            k: f[2].parse().map_err(|_| parse_err("k"))?,
            fold: f[3].parse().map_err(|_| parse_err("fold"))?,
            dsc: f[4].parse().map_err(|_| parse_err("dsc"))?,
            n_trainable: f[5].parse().map_err(|_| parse_err("n_trainable"))?,
            seconds: f[6].parse().map_err(|_| parse_err("seconds"))?,
            error: None,
        });
    }
    Ok(cells)
}

/// Deterministic per-cell seeds: the task depends only on (seed, organ, fold)
/// so every strategy and shot count sees the same query volume.
pub fn task_seed(seed: u64, organ: usize, fold: usize) -> u64 {
    Rng::new(seed).split(0x7A5C).split(organ as u64).split(fold as u64).next_u64()
}

/// Run the full benchmark grid. Cells already present in `existing` (matched
/// by key) are reused, which is what makes interrupted runs resumable.
pub fn run_benchmark(
    pretrained: &SegModel,
    target_spec: &DatasetSpec,
    organ_specs: &[OrganSpec],
    classes: &[String],
    cfg: &BenchmarkConfig,
    existing: &[EvalCell],
) -> Result<Vec<EvalCell>> {
    cfg.adapt.validate()?;
    if cfg.strategies.is_empty() || cfg.shots.is_empty() || cfg.organs.is_empty() || cfg.folds == 0 {
        return Err(Error::Config("benchmark grid must be non-empty".into()));
    }
    let n_classes = classes.len();
    let mut todo: Vec<(usize, usize, usize, TrainStrategy)> = Vec::new();
    for &organ in &cfg.organs {
        for &strategy in &cfg.strategies {
            for &k in &cfg.shots {
                for fold in 0..cfg.folds {
                    todo.push((organ, fold, k, strategy));
                }
            }
        }
    }
    let done: std::collections::BTreeMap<_, EvalCell> =
        existing.iter().map(|c| (c.key(), c.clone())).collect();

    let run_cell = |&(organ, fold, k, strategy): &(usize, usize, usize, TrainStrategy)| -> EvalCell {
        let name = classes.get(organ).cloned().unwrap_or_else(|| format!("organ_{organ}"));
        let t0 = Instant::now();
        let result: Result<(f64, usize)> = (|| {
            let task = build_fewshot_task(
                target_spec,
                organ_specs,
                n_classes,
                organ,
                k,
                task_seed(cfg.seed, organ, fold),
            )?;
            let mut acfg = cfg.adapt.clone();
            acfg.strategy = strategy;
            acfg.shots = k;
            acfg.seed = Rng::new(cfg.seed)
                .split(0xCE11)
                .split(organ as u64)
                .split(fold as u64)
                .split(k as u64)
                .split(strategy as u64)
                .next_u64();
            let (mut model, _) = adapt(pretrained, &task, &acfg)?;
            let probs =
                sliding_window_predict(&mut model, &task.query, acfg.patch_size, cfg.eval_overlap)?;
            let pred = binarize_and_largest_cc(&probs, cfg.threshold)?;
            let dsc = dice_score(&pred, task.eval_ground_truth().for_evaluation())?;
            let n_trainable = model.count_trainable()?;
            Ok((dsc, n_trainable))
        })();
        let seconds = if cfg.record_timing { t0.elapsed().as_secs_f64() } else { 0.0 };
        match result {
            Ok((dsc, n_trainable)) => EvalCell {
                organ: name,
                organ_class: organ,
                strategy,
                k,
                fold,
                dsc,
                n_trainable,
                seconds,
                error: None,
            },
            Err(e) => EvalCell {
                organ: name,
                organ_class: organ,
                strategy,
                k,
                fold,
                dsc: f64::NAN,
                n_trainable: 0,
                seconds,
                error: Some(e.to_string()),
            },
        }
    };

    let pending: Vec<&(usize, usize, usize, TrainStrategy)> = todo
        .iter()
        .filter(|(organ, fold, k, strategy)| {
            !done.contains_key(&(*organ, strategy.tag().to_string(), *k, *fold))
        })
        .collect();

    let mut fresh: Vec<EvalCell> = if cfg.workers > 1 {
        let chunk = pending.len().div_ceil(cfg.workers.max(1));
        let mut out: Vec<Option<EvalCell>> = vec![None; pending.len()];
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (ci, cells) in pending.chunks(chunk.max(1)).enumerate() {
                let run = &run_cell;
                handles.push((ci, scope.spawn(move || cells.iter().map(|c| run(c)).collect::<Vec<_>>())));
            }
            for (ci, h) in handles {
                let res = h.join().expect("benchmark worker panicked");
                for (j, cell) in res.into_iter().enumerate() {
                    out[ci * chunk.max(1) + j] = Some(cell);
                }
            }
        });
        out.into_iter().flatten().collect()
    } else {
        pending.iter().map(|c| run_cell(c)).collect()
    };

    let mut all: Vec<EvalCell> = done.into_values().collect();
    all.append(&mut fresh);
    // canonical order: organ class, strategy tag, k, fold
    all.sort_by_key(|c| c.key());
    Ok(all)
}

/// Unrounded summary data: per (shots, strategy), the per-organ fold means
/// and their arithmetic mean (the Avg column).
pub struct SummaryRow {
    pub k: usize,
    pub strategy: TrainStrategy,
    pub organ_means: Vec<(String, Option<f64>)>,
    pub avg: Option<f64>,
}

pub fn summary_rows(cells: &[EvalCell]) -> Vec<SummaryRow> {
    let mut organs: Vec<(usize, String)> =
        cells.iter().map(|c| (c.organ_class, c.organ.clone())).collect();
    organs.sort();
    organs.dedup();
    let mut shots: Vec<usize> = cells.iter().map(|c| c.k).collect();
    shots.sort_unstable();
    shots.dedup();
    let mut strategies: Vec<TrainStrategy> = cells.iter().map(|c| c.strategy).collect();
    strategies.sort();
    strategies.dedup();
    let mut rows = Vec::new();
    for &k in &shots {
        for &s in &strategies {
            let mut organ_means = Vec::new();
            let mut means = Vec::new();
            for (oc, name) in &organs {
                let vals: Vec<f64> = cells
                    .iter()
                    .filter(|c| c.k == k && c.strategy == s && c.organ_class == *oc && c.dsc.is_finite())
                    .map(|c| c.dsc)
                    .collect();
                if vals.is_empty() {
                    organ_means.push((name.clone(), None));
                } else {
                    let m = vals.iter().sum::<f64>() / vals.len() as f64;
                    means.push(m);
                    organ_means.push((name.clone(), Some(m)));
                }
            }
            let avg = if means.is_empty() {
                None
            } else {
                Some(means.iter().sum::<f64>() / means.len() as f64)
            };
            rows.push(SummaryRow { k, strategy: s, organ_means, avg });
        }
    }
    rows
}

/// Table-style summary: one block per shot count, one row per strategy,
/// one column per organ plus the Avg column (arithmetic mean over organs of
/// the per-organ fold means).
pub fn summary_table(cells: &[EvalCell]) -> String {
    let rows = summary_rows(cells);
    let mut out = String::new();
    let mut current_k = usize::MAX;
    for row in &rows {
        if row.k != current_k {
            current_k = row.k;
            out.push_str(&format!("== {}-shot ==\n", row.k));
            out.push_str(&format!("{:<16}", "strategy"));
            for (name, _) in &row.organ_means {
                out.push_str(&format!("{name:>12}"));
            }
            out.push_str(&format!("{:>12}\n", "Avg"));
        }
        out.push_str(&format!("{:<16}", row.strategy.tag()));
        for (_, m) in &row.organ_means {
            match m {
                Some(m) => out.push_str(&format!("{m:>12.3}")),
                None => out.push_str(&format!("{:>12}", "-")),
            }
        }
        match row.avg {
            Some(a) => out.push_str(&format!("{a:>12.3}\n")),
            None => out.push_str(&format!("{:>12}\n", "-")),
        }
    }
    out
}
