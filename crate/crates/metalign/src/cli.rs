//! Command-line surface: synthetic data generation, staged training, metric
//! recomputation, the ablation suite, gradient checks, and checkpoint
//! inspection.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use metalign_core::data::{generate_synthetic_cohort, SyntheticSpec};
use metalign_core::gradcheck::{run_gradcheck, GradCheckConfig, GradCheckSizes};

use crate::ablation::{parse_variants, run_ablation_suite};
use crate::checkpoint;
use crate::config::{load_config, RunConfig};
use crate::corpus::{generate_synthetic_corpus, write_corpus};
use crate::error::{AppError, Result};
use crate::manifest::{write_manifest, write_manifest_with_images};
use crate::pipeline::{
    class_counts, metrics_from_predictions, read_predictions, run_full, RunDirs, RunOptions,
    RunSummary, StageSelection,
};

/// Environment variable naming the default config path.
pub const CONFIG_ENV: &str = "METALIGN_CONFIG";

#[derive(Debug, Parser)]
#[command(
    name = "metalign",
    about = "Multi-granular image-metadata alignment: synthetic data, staged training, evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort manifest plus a matching corpus.
    GenData(GenDataArgs),
    /// Run the training pipeline (all stages or a subset), resuming from
    /// existing checkpoints.
    Train(TrainArgs),
    /// Recompute metrics from the prediction files of a finished run.
    Eval(EvalArgs),
    /// Run the ablation variant suite.
    Ablate(AblateArgs),
    /// Verify analytic loss gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Print a checkpoint's provenance and trainable-parameter report.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 600)]
    pub patients: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Attribute-label correlation strength in [0, 1].
    #[arg(long, default_value_t = 0.8)]
    pub corr: f64,
    /// Class-conditional image signal strength.
    #[arg(long, default_value_t = 0.5)]
    pub signal: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub scans_min: usize,
    #[arg(long, default_value_t = 3)]
    pub scans_max: usize,
    /// Relative class weights, comma-separated (uniform when omitted).
    #[arg(long)]
    pub skew: Option<String>,
    #[arg(long, default_value_t = 60)]
    pub corpus_docs: usize,
    /// Store scans as PNG files instead of inline tensors (lossy 8-bit).
    #[arg(long)]
    pub png: bool,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Config file; falls back to $METALIGN_CONFIG.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Stages to execute: `all` or a comma list of 1,2,3.
    #[arg(long, default_value = "all")]
    pub stage: String,
    /// Dotted-key overrides, e.g. `--set losses.beta2=0.5`.
    #[arg(long = "set")]
    pub overrides: Vec<String>,
    /// Output directory override (else config's run.out_dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory holding fold_*/predictions.jsonl and config.toml.
    #[arg(long)]
    pub run_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `default` (nine rows), `full`, `none`, or comma-separated indices.
    #[arg(long, default_value = "default")]
    pub variants: String,
    #[arg(long = "set")]
    pub overrides: Vec<String>,
    /// Suite output directory (defaults to `<run.out_dir>/ablation`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Emit the variant table without training.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    /// Size bounds, e.g. `N=4,L=4,K=5,d=8`.
    #[arg(long, default_value = "N=4,L=4,K=5,d=8")]
    pub sizes: String,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Test hook: corrupt one analytic gradient so the check must fail.
    #[arg(long, hide = true)]
    pub corrupt: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

fn resolve_config(path: &Option<PathBuf>, overrides: &[String]) -> Result<RunConfig> {
    let path = match path {
        Some(p) => p.clone(),
        None => std::env::var(CONFIG_ENV).map(PathBuf::from).map_err(|_| {
            AppError::validation(format!(
                "no --config given and ${CONFIG_ENV} is not set"
            ))
        })?,
    };
    load_config(&path, overrides)
}

fn parse_sizes(text: &str) -> Result<GradCheckSizes> {
    let mut sizes = GradCheckSizes::default();
    for part in text.split(',') {
        let (key, value) = part.split_once('=').ok_or_else(|| {
            AppError::validation(format!("size spec '{part}' must look like N=4"))
        })?;
        let value: usize = value.trim().parse().map_err(|_| {
            AppError::validation(format!("size value '{value}' is not an integer"))
        })?;
        match key.trim() {
            "N" | "n" => sizes.n = value,
            "L" | "l" => sizes.l = value,
            "K" | "k" => sizes.k = value,
            "D" | "d" => sizes.d = value,
            other => {
                return Err(AppError::validation(format!(
                    "unknown size key '{other}' (expected N, L, K, d)"
                )))
            }
        }
    }
    Ok(sizes)
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    if args.out.exists() && std::fs::read_dir(&args.out)?.next().is_some() && !args.force {
        return Err(AppError::validation(format!(
            "output directory '{}' is not empty; pass --force to overwrite",
            args.out.display()
        )));
    }
    let class_weights = match &args.skew {
        Some(spec) => spec
            .split(',')
            .map(|w| {
                w.trim().parse::<f64>().map_err(|_| {
                    AppError::validation(format!("skew weight '{w}' is not a number"))
                })
            })
            .collect::<Result<Vec<f64>>>()?,
        None => Vec::new(),
    };
    let spec = SyntheticSpec {
        patients: args.patients,
        classes: args.classes,
        correlation: args.corr,
        image_signal: args.signal,
        seed: args.seed,
        scans_min: args.scans_min,
        scans_max: args.scans_max,
        channels: 3,
        height: 16,
        width: 16,
        class_weights,
    };
    let manifest = generate_synthetic_cohort(&spec)?;
    std::fs::create_dir_all(&args.out)?;
    let manifest_path = args.out.join("manifest.jsonl");
    if args.png {
        write_manifest_with_images(&manifest_path, &manifest)?;
    } else {
        write_manifest(&manifest_path, &manifest)?;
    }
    let corpus = generate_synthetic_corpus(&manifest.schema, args.classes, args.corpus_docs, args.seed)?;
    write_corpus(&args.out.join("corpus.jsonl"), &corpus)?;

    let counts = class_counts(&manifest);
    let total: usize = counts.values().sum();
    println!("wrote {} records to {}", manifest.len(), manifest_path.display());
    for (class, count) in &counts {
        println!("  {class}: {count}");
    }
    println!("  total: {total}");
    println!("wrote {} corpus documents", corpus.len());
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut config = resolve_config(&args.config, &args.overrides)?;
    if let Some(out) = &args.out {
        config.run.out_dir = out.clone();
    }
    let stages = StageSelection::parse(&args.stage)?;
    let options = RunOptions {
        stages,
        ..RunOptions::default()
    };
    let summary = run_full(&config, &options)?;
    match summary {
        Some(run) => {
            eprintln!(
                "run complete: macro F1 {:.2} ({:.2}), Acc {:.2} ({:.2}), BAcc {:.2} ({:.2})",
                run.summary.macro_f1_mean,
                run.summary.macro_f1_sd,
                run.summary.accuracy_mean,
                run.summary.accuracy_sd,
                run.summary.balanced_accuracy_mean,
                run.summary.balanced_accuracy_sd,
            );
            println!("{}", std::fs::read_to_string(RunDirs::new(config.run.out_dir).metrics_table())?);
        }
        None => {
            eprintln!("selected stages complete (no metrics; stage 3 not run)");
        }
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let dirs = RunDirs::new(args.run_dir.clone());
    let snapshot_path = dirs.config_snapshot();
    if !snapshot_path.exists() {
        return Err(AppError::validation(format!(
            "no config snapshot at '{}'",
            snapshot_path.display()
        )));
    }
    let config = load_config(&snapshot_path, &[])?;
    let mut per_fold = Vec::new();
    for fold in 0..config.run.n_folds {
        let path = dirs.predictions(fold);
        let rows = read_predictions(&path)?;
        // class order comes from probabilities; recover via manifest classes
        let manifest = crate::manifest::load_manifest(&config.data.manifest)?;
        per_fold.push(metrics_from_predictions(&rows, &manifest.classes)?);
    }
    let summary = metalign_core::metrics::aggregate_folds(&per_fold)?;
    let run = RunSummary { per_fold, summary };
    let recomputed = args.run_dir.join("metrics.recomputed.json");
    std::fs::write(&recomputed, serde_json::to_string_pretty(&run)?)?;
    println!("{}", crate::report::fold_table(&run));
    eprintln!("recomputed metrics written to {}", recomputed.display());
    Ok(())
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let config = resolve_config(&args.config, &args.overrides)?;
    let variants = parse_variants(&args.variants)?;
    let root = args
        .out
        .clone()
        .unwrap_or_else(|| config.run.out_dir.join("ablation"));
    let outcome = run_ablation_suite(&config, &variants, &root, args.dry_run)?;
    println!(
        "{}",
        std::fs::read_to_string(root.join("ablation_table.txt"))?
    );
    eprintln!(
        "{} variants written under {}",
        outcome.rows.len(),
        root.display()
    );
    Ok(())
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let config = GradCheckConfig {
        seed: args.seed,
        instances: args.instances,
        sizes: parse_sizes(&args.sizes)?,
        tolerance: args.tolerance,
        corrupt: args.corrupt,
        ..GradCheckConfig::default()
    };
    println!(
        "gradient check: {} instances, sizes N<={} L<={} K<={} d<={}, h={:.0e}, tolerance {:.0e}",
        config.instances,
        config.sizes.n,
        config.sizes.l,
        config.sizes.k,
        config.sizes.d,
        config.step,
        config.tolerance
    );
    let report = run_gradcheck(&config)?;
    for loss in &report.losses {
        println!(
            "{:>22}: max rel err {:.3e} over {} entries [{}]",
            loss.loss,
            loss.max_rel_error,
            loss.checked_entries,
            if loss.passed { "pass" } else { "FAIL" }
        );
    }
    if report.passed {
        println!("all losses pass");
        Ok(())
    } else {
        Err(AppError::CheckFailed(
            "at least one loss exceeded the gradient tolerance".into(),
        ))
    }
}

pub fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    if !checkpoint::checkpoint_exists(&args.checkpoint) {
        return Err(AppError::validation(format!(
            "no checkpoint at '{}' (expected manifest.json and model.json)",
            args.checkpoint.display()
        )));
    }
    let manifest = checkpoint::load_manifest(&args.checkpoint)?;
    println!("checkpoint: {}", args.checkpoint.display());
    println!("  format version: {}", manifest.format_version);
    println!("  stage: {}", manifest.stage);
    println!("  run seed: {}", manifest.run_seed);
    if let Some(fold) = manifest.fold {
        println!("  fold: {fold}");
    }
    println!("  config hash: {:#018x}", manifest.config_hash);
    println!("  adapter targets: {}", manifest.adapter_targets);
    println!("  vocabulary: {} ids", manifest.vocabulary_len);
    println!("  parameters (trainable/total):");
    for component in &manifest.parameter_report.components {
        let frozen = if component.trainable == 0 { " [frozen]" } else { "" };
        println!(
            "    {:>24}: {:>8} / {:<8}{frozen}",
            component.component, component.trainable, component.total
        );
    }
    println!(
        "  trainable fraction: {:.4} ({} of {})",
        manifest.parameter_report.trainable_fraction,
        manifest.parameter_report.trainable,
        manifest.parameter_report.total
    );
    println!("  component fingerprints:");
    for (name, fp) in &manifest.fingerprints {
        println!("    {name:>24}: {fp:#018x}");
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Inspect(args) => cmd_inspect(args),
    }
}
