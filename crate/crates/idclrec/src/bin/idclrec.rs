//! Command-line pipeline: prepare datasets, train, evaluate, run ablations
//! and grid searches, analyze representation dumps and export them.
//!
//! Human-readable progress goes to stderr; machine-readable results go to
//! stdout and files. Every command writes beneath a run directory named by a
//! content hash of its parameters, so identical invocations land in the same
//! place with identical bytes (wall-clock columns aside).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

use idclrec::analysis::{self, ExportKind, ReprDump};
use idclrec::data::{self, Format, PreparedDataset};
use idclrec::error::{Error, Result};
use idclrec::metrics::{self, MetricsReport, Split};
use idclrec::model::{AblationVariant, ModelSettings};
use idclrec::params::ModelParams;
use idclrec::trainer::{self, GridMode, TrainConfig};

#[derive(Parser)]
#[command(name = "idclrec", version, about = "Intent-interest disentangled sequential recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest raw interactions, 5-core filter, build sequences, write the
    /// prepared dataset.
    Prep(PrepArgs),
    /// Train one configuration across seeds; write logs, checkpoints and
    /// test metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the validation or test split.
    Eval(EvalArgs),
    /// Train every ablation variant and emit the comparison table.
    Ablate(AblateArgs),
    /// Hyperparameter grid search ranked by validation NDCG@20.
    Grid(GridArgs),
    /// Cluster a representation dump and compute similarity distributions.
    Analyze(AnalyzeArgs),
    /// Export per-user intent/interest representations from a checkpoint.
    Export(ExportArgs),
}

#[derive(Args)]
struct PrepArgs {
    /// Raw interaction file: header-less user<sep>item<sep>timestamp lines.
    #[arg(long)]
    input: PathBuf,
    /// Input separator convention.
    #[arg(long, default_value = "tsv")]
    format: String,
    /// Output root; the dataset lands in a hashed run directory beneath it.
    #[arg(long)]
    out: PathBuf,
    /// Maximum model sequence length N.
    #[arg(long, default_value_t = 50)]
    n: usize,
    /// Minimum prefix length for subsequence augmentation.
    #[arg(long, default_value_t = 1)]
    min_len: usize,
    /// Dataset seed recorded in the manifest.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

/// Training hyperparameter overrides shared by train/ablate/grid.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Config file (JSON or key=value lines); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    /// Maximum sequence length N (must match the prepared dataset).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Intent similarity threshold delta.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    lambda_d: Option<f64>,
    #[arg(long)]
    lambda_cl1: Option<f64>,
    #[arg(long)]
    lambda_cl2: Option<f64>,
    /// Comma-separated run seeds.
    #[arg(long)]
    seeds: Option<String>,
    /// Model variant: full or A..G.
    #[arg(long)]
    variant: Option<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<TrainConfig> {
        let mut config = match &self.config {
            Some(path) => TrainConfig::from_file(path)?,
            None => TrainConfig::default(),
        };
        macro_rules! apply {
            ($field:ident, $key:expr) => {
                if let Some(v) = &self.$field {
                    config.apply_kv($key, &v.to_string())?;
                }
            };
        }
        apply!(d, "d");
        apply!(n, "N");
        apply!(blocks, "blocks");
        apply!(heads, "heads");
        apply!(dropout, "dropout");
        apply!(tau, "tau");
        apply!(lr, "lr");
        apply!(batch, "batch");
        apply!(max_epochs, "max_epochs");
        apply!(patience, "patience");
        apply!(delta, "delta");
        apply!(lambda_d, "lambda_d");
        apply!(lambda_cl1, "lambda_cl1");
        apply!(lambda_cl2, "lambda_cl2");
        apply!(seeds, "seeds");
        apply!(variant, "variant");
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Prepared dataset directory (sequences.tsv + manifest.json).
    #[arg(long)]
    data: PathBuf,
    /// Output root for logs, checkpoints and metrics.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint prefix (expects <prefix>.json and <prefix>.bin).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Split to evaluate: valid or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Intent similarity threshold used at inference.
    #[arg(long, default_value_t = 0.7)]
    delta: f64,
    /// Model variant the checkpoint was trained with.
    #[arg(long, default_value = "full")]
    variant: String,
    /// Append the report as a CSV row to this file.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Grid axis as key=v1,v2,...; repeatable.
    #[arg(long = "sweep", required = true)]
    sweeps: Vec<String>,
    /// one-at-a-time (sweep each axis alone) or full (Cartesian product).
    #[arg(long, default_value = "one-at-a-time")]
    mode: String,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Representation dump: id<TAB>v1 v2 ... vd lines.
    #[arg(long)]
    reprs: PathBuf,
    /// Number of k-means clusters.
    #[arg(long)]
    k: usize,
    /// Aligned one-hot item vectors for the overlap statistics.
    #[arg(long)]
    onehots: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which representations to write: intent, interest or both.
    #[arg(long, default_value = "both")]
    which: String,
    #[arg(long, default_value_t = 0.7)]
    delta: f64,
    #[arg(long, default_value = "full")]
    variant: String,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Prep(args) => prep(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Ablate(args) => ablate(args),
        Command::Grid(args) => grid(args),
        Command::Analyze(args) => analyze(args),
        Command::Export(args) => export(args),
    }
}

/// Run directory under `out`, named by a short content hash of the
/// command's parameters. `IDCLREC_RUN_ROOT`, when set, re-roots relative
/// `--out` paths; it is the only environment override.
fn run_dir(out: &Path, parts: &[String]) -> Result<PathBuf> {
    let out = match std::env::var_os("IDCLREC_RUN_ROOT") {
        Some(root) if out.is_relative() => PathBuf::from(root).join(out),
        _ => out.to_path_buf(),
    };
    let digest = Sha256::digest(parts.join("\x1f").as_bytes());
    let dir = out.join(hex::encode(&digest[..6]));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn config_hash_parts(label: &str, data: &Path, config: &TrainConfig) -> Vec<String> {
    vec![
        label.to_string(),
        data.display().to_string(),
        serde_json::to_string(config).expect("config serializes"),
    ]
}

fn prep(args: PrepArgs) -> Result<()> {
    let format: Format = args.format.parse()?;
    let records = data::load_interactions(&args.input, format)?;
    eprintln!("prep: loaded {} interactions from {}", records.len(), args.input.display());
    let (dataset, _vocab) =
        PreparedDataset::from_records(&records, args.n, args.min_len, args.seed);
    let stats = dataset.stats();
    eprintln!(
        "prep: 5-core kept {} users, {} items, {} interactions (avg length {:.1}, sparsity {:.2}%)",
        stats.num_users,
        stats.num_items,
        stats.num_interactions,
        stats.avg_length,
        stats.sparsity * 100.0
    );
    let instances = dataset.training_instances();
    if instances.is_empty() {
        eprintln!("prep: warning: zero training instances (min_len {} too large?)", args.min_len);
    }
    let dir = run_dir(
        &args.out,
        &[
            "prep".to_string(),
            args.input.display().to_string(),
            args.format.clone(),
            args.n.to_string(),
            args.min_len.to_string(),
            args.seed.to_string(),
        ],
    )?;
    dataset.save(&dir)?;
    let (_, excluded) = dataset.splits();
    if excluded > 0 {
        eprintln!("prep: {excluded} users too short to split (need >= 3 interactions)");
    }
    println!(
        "{}",
        json!({
            "run_dir": dir,
            "num_users": stats.num_users,
            "num_items": stats.num_items,
            "num_interactions": stats.num_interactions,
            "avg_length": stats.avg_length,
            "sparsity": stats.sparsity,
            "training_instances": instances.len(),
            "excluded_users": excluded,
        })
    );
    Ok(())
}

fn report_json(report: &MetricsReport) -> serde_json::Value {
    json!({
        "split": report.split.to_string(),
        "hr": report.hr.iter().map(|(k, v)| (k.to_string(), json!(v))).collect::<serde_json::Map<_, _>>(),
        "ndcg": report.ndcg.iter().map(|(k, v)| (k.to_string(), json!(v))).collect::<serde_json::Map<_, _>>(),
        "n_users": report.num_users_evaluated,
        "seed": report.seed,
    })
}

fn train(args: TrainArgs) -> Result<()> {
    let config = args.config.build()?;
    let dataset = PreparedDataset::load(&args.data)?;
    let dir = run_dir(&args.out, &config_hash_parts("train", &args.data, &config))?;
    fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(&config).expect("config serializes") + "\n",
    )
    .map_err(|e| Error::io(dir.join("config.json"), e))?;
    eprintln!(
        "train: {} users, {} items, variant {}, seeds {:?} -> {}",
        dataset.manifest.num_users,
        dataset.manifest.num_items,
        config.variant.code(),
        config.seeds,
        dir.display()
    );
    let outcome = trainer::run_multi_seed(&config, &dataset, Some(&dir))?;
    let mut csv = MetricsReport::csv_header();
    csv.push('\n');
    for (_, report, _) in &outcome.per_seed {
        csv.push_str(&report.csv_row());
        csv.push('\n');
    }
    csv.push_str(&outcome.mean_test.csv_row());
    csv.push('\n');
    fs::write(dir.join("metrics.csv"), csv).map_err(|e| Error::io(dir.join("metrics.csv"), e))?;
    let payload = json!({
        "run_dir": dir,
        "variant": config.variant.code(),
        "per_seed": outcome
            .per_seed
            .iter()
            .map(|(seed, report, best_epoch)| {
                json!({"seed": seed, "best_epoch": best_epoch, "test": report_json(report)})
            })
            .collect::<Vec<_>>(),
        "mean_test": report_json(&outcome.mean_test),
    });
    fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(&payload).expect("metrics serialize") + "\n",
    )
    .map_err(|e| Error::io(dir.join("metrics.json"), e))?;
    println!("{payload}");
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let split: Split = args.split.parse()?;
    let params = ModelParams::load(&args.checkpoint)?;
    let dataset = PreparedDataset::load(&args.data)?;
    let settings = ModelSettings {
        delta: args.delta,
        variant: AblationVariant::parse(&args.variant)?,
    };
    let report = metrics::evaluate(&params, &dataset, split, &settings)?;
    if let Some(csv_path) = &args.csv {
        let mut text = if csv_path.exists() {
            fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path, e))?
        } else {
            let mut h = MetricsReport::csv_header();
            h.push('\n');
            h
        };
        text.push_str(&report.csv_row());
        text.push('\n');
        fs::write(csv_path, text).map_err(|e| Error::io(csv_path, e))?;
    }
    println!("{}", report_json(&report));
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<()> {
    let config = args.config.build()?;
    let dataset = PreparedDataset::load(&args.data)?;
    let dir = run_dir(&args.out, &config_hash_parts("ablate", &args.data, &config))?;
    eprintln!("ablate: running all 8 variants -> {}", dir.display());
    let rows = trainer::ablation_sweep(&config, &dataset, Some(&dir))?;
    let mut csv = String::from("variant,test_hr@20,test_ndcg@20\n");
    for (variant, report) in &rows {
        csv.push_str(&format!(
            "{},{:.6},{:.6}\n",
            variant.code(),
            report.hr[&20],
            report.ndcg[&20]
        ));
    }
    fs::write(dir.join("ablation.csv"), &csv)
        .map_err(|e| Error::io(dir.join("ablation.csv"), e))?;
    println!(
        "{}",
        json!({
            "run_dir": dir,
            "rows": rows
                .iter()
                .map(|(v, r)| json!({
                    "variant": v.code(),
                    "test_hr@20": r.hr[&20],
                    "test_ndcg@20": r.ndcg[&20],
                }))
                .collect::<Vec<_>>(),
        })
    );
    Ok(())
}

fn grid(args: GridArgs) -> Result<()> {
    let config = args.config.build()?;
    let dataset = PreparedDataset::load(&args.data)?;
    let mode = match args.mode.as_str() {
        "one-at-a-time" | "sweep" => GridMode::OneAtATime,
        "full" => GridMode::Full,
        other => return Err(Error::Config(format!("unknown grid mode '{other}'"))),
    };
    let mut grids = Vec::new();
    for sweep in &args.sweeps {
        let (key, values) = sweep
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("sweep '{sweep}' is not key=v1,v2,...")))?;
        let values: Vec<f64> = values
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("invalid grid value '{v}'")))
            })
            .collect::<Result<_>>()?;
        grids.push((key.trim().to_string(), values));
    }
    let mut parts = config_hash_parts("grid", &args.data, &config);
    parts.push(args.sweeps.join("|"));
    parts.push(args.mode.clone());
    let dir = run_dir(&args.out, &parts)?;
    eprintln!("grid: {} axes, mode {} -> {}", grids.len(), args.mode, dir.display());
    let cells = trainer::grid_search(&config, &dataset, &grids, mode)?;
    let mut csv = String::from("assignment,valid_hr@20,valid_ndcg@20,best_epoch\n");
    for cell in &cells {
        let assignment = cell
            .assignment
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";");
        csv.push_str(&format!(
            "{assignment},{:.6},{:.6},{}\n",
            cell.valid_hr20, cell.valid_ndcg20, cell.best_epoch
        ));
    }
    fs::write(dir.join("grid.csv"), &csv).map_err(|e| Error::io(dir.join("grid.csv"), e))?;
    let best = &cells[0];
    println!(
        "{}",
        json!({
            "run_dir": dir,
            "cells": cells.len(),
            "best": {
                "assignment": best.assignment.iter().map(|(k, v)| json!({"key": k, "value": v})).collect::<Vec<_>>(),
                "valid_ndcg@20": best.valid_ndcg20,
                "valid_hr@20": best.valid_hr20,
            },
        })
    );
    Ok(())
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let dump = ReprDump::load_tsv(&args.reprs)?;
    let dir = run_dir(
        &args.out,
        &[
            "analyze".to_string(),
            args.reprs.display().to_string(),
            args.k.to_string(),
            args.max_iters.to_string(),
            args.seed.to_string(),
            args.onehots
                .as_ref()
                .map_or_else(String::new, |p| p.display().to_string()),
        ],
    )?;
    eprintln!(
        "analyze: {} rows x {} dims, k={} -> {}",
        dump.matrix.rows,
        dump.matrix.cols,
        args.k,
        dir.display()
    );
    let clustering = analysis::kmeans(&dump.matrix, args.k, args.max_iters, args.seed)?;
    // Cluster assignments aligned with dump ids.
    let mut assign_text = String::new();
    for (id, &c) in dump.ids.iter().zip(&clustering.assignments) {
        assign_text.push_str(&format!("{id}\t{c}\n"));
    }
    fs::write(dir.join("assignments.tsv"), assign_text)
        .map_err(|e| Error::io(dir.join("assignments.tsv"), e))?;

    let write_dist = |name: &str, dist: &analysis::SimilarityDist| -> Result<()> {
        let mut values = String::from("value\n");
        for v in &dist.values {
            values.push_str(&format!("{v:.6}\n"));
        }
        fs::write(dir.join(format!("{name}_values.csv")), values)
            .map_err(|e| Error::io(dir.join(format!("{name}_values.csv")), e))?;
        analysis::write_histogram_csv(&dir.join(format!("{name}_hist.csv")), &dist.histogram)
    };

    let centroid = analysis::centroid_similarity_dist(&dump.matrix, &clustering)?;
    write_dist("centroid_similarity", &centroid)?;
    let min_intra = analysis::min_intra_similarity_dist(&dump.matrix, &clustering)?;
    write_dist("min_intra_similarity", &min_intra)?;
    let max_inter = if args.k >= 2 {
        let d = analysis::max_avg_inter_similarity_dist(&dump.matrix, &clustering)?;
        write_dist("max_avg_inter_similarity", &d)?;
        Some(d)
    } else {
        None
    };

    let overlap = match &args.onehots {
        Some(path) => {
            let onehots = ReprDump::load_tsv(path)?;
            let (intra, inter) = analysis::item_overlap_similarity(&onehots.matrix, &clustering)?;
            Some((intra, inter))
        }
        None => None,
    };

    println!(
        "{}",
        json!({
            "run_dir": dir,
            "k": args.k,
            "inertia": clustering.inertia,
            "iterations": clustering.inertia_trace.len(),
            "min_intra_skipped": min_intra.skipped,
            "max_avg_inter_rows": max_inter.map(|d| d.values.len()),
            "item_overlap": overlap.map(|(intra, inter)| json!({
                "intra_mean": intra,
                "inter_mean": inter,
            })),
        })
    );
    Ok(())
}

fn export(args: ExportArgs) -> Result<()> {
    let params = ModelParams::load(&args.checkpoint)?;
    let dataset = PreparedDataset::load(&args.data)?;
    let which: ExportKind = args.which.parse()?;
    let settings = ModelSettings {
        delta: args.delta,
        variant: AblationVariant::parse(&args.variant)?,
    };
    let dir = run_dir(
        &args.out,
        &[
            "export".to_string(),
            args.checkpoint.display().to_string(),
            args.data.display().to_string(),
            args.which.clone(),
            args.delta.to_string(),
            args.variant.clone(),
        ],
    )?;
    let files = analysis::export_representations(&params, &dataset, which, &settings, &dir)?;
    println!(
        "{}",
        json!({
            "run_dir": dir,
            "files": files,
            "users": dataset.sequences.len(),
        })
    );
    Ok(())
}
