//! Command-line entry point: corpus synthesis, pretraining, adaptation
//! benchmarks, and report generation, driven by a declarative config file.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use voladapt::commands::{cmd_adapt_eval, cmd_pretrain, cmd_report, cmd_synth};
use voladapt::config::RunConfig;
use voladapt::engines::summary_table;
use voladapt::error::Error;

#[derive(Parser)]
#[command(name = "voladapt", version, about = "Pretrain-and-adapt toolkit for volumetric organ segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to the run configuration (.toml or .json)
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override the configured output directory
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override the configured global seed
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Resume from existing on-disk artifacts
    #[arg(long)]
    resume: bool,
    /// Parallel benchmark workers (results are deterministic regardless;
    /// training inside a cell is always single-threaded)
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic pretraining corpus
    Synth(ConfigArgs),
    /// Pretrain the foundation model on the synthesized corpus
    Pretrain(ConfigArgs),
    /// Run the adaptation benchmark grid and evaluate on query volumes
    AdaptEval(ConfigArgs),
    /// Render markdown + SVG reports from archived result CSVs
    Report {
        /// Directory containing result sets (searched recursively)
        #[arg(long, value_name = "DIR")]
        results: PathBuf,
        /// Merge result sets even when their config hashes differ
        #[arg(long)]
        force: bool,
    },
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = args.workers {
        cfg.benchmark.workers = workers;
    }
    Ok(cfg)
}

fn run() -> Result<(), Error> {
    match Cli::parse().command {
        Command::Synth(args) => {
            let cfg = load_config(&args)?;
            let manifest = cmd_synth(&cfg)?;
            println!(
                "synthesized {} samples over {} classes into {}",
                manifest.samples.len(),
                manifest.n_classes,
                cfg.out_dir.join("corpus").display()
            );
            for (name, count) in manifest.classes.iter().zip(&manifest.per_class_annotated) {
                println!("  {name}: annotated in {count} samples");
            }
            for w in &manifest.warnings {
                println!("warning: {w}");
            }
        }
        Command::Pretrain(args) => {
            let cfg = load_config(&args)?;
            let (ckpt, curve) = cmd_pretrain(&cfg, args.resume)?;
            println!(
                "pretrained {} epochs, final loss {:.4}, checkpoint {}",
                curve.len(),
                curve.last().copied().unwrap_or(f64::NAN),
                ckpt.display()
            );
        }
        Command::AdaptEval(args) => {
            let cfg = load_config(&args)?;
            let (csv, cells) = cmd_adapt_eval(&cfg, args.resume)?;
            print!("{}", summary_table(&cells));
            let failures = cells.iter().filter(|c| c.error.is_some()).count();
            println!("wrote {} ({} cells, {} failed)", csv.display(), cells.len(), failures);
        }
        Command::Report { results, force } => {
            let md = cmd_report(&results, force)?;
            println!("wrote {}", md.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
