//! `dualbind` command line: dataset generation, training, evaluation,
//! prediction, rank-fit diagnostics, and the two canned experiment recipes.
//!
//! Exit codes: 0 success, 1 I/O, 2 usage/config, 3 numerical abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dualbind::data::{load_dataset, save_dataset, Complex, Manifest, Split};
use dualbind::energy::load_checkpoint;
use dualbind::metrics::{evaluate, rank_fit};
use dualbind::synth::{generate_dataset, GenConfig};
use dualbind::trainer::{experiment_table, run_experiment, train, Mode, TrainConfig};
use dualbind::{Error, Result};

#[derive(Parser)]
#[command(name = "dualbind", version, about = "Dual-loss binding energy models on a synthetic benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (dataset.jsonl + manifest.json).
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes metrics.csv, best.ckpt.json, summary.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Print per-complex predictions for a split as CSV.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Output CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank-fit diagnostic (predicted vs true ranks) for a split.
    Rankfit {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a canned multi-seed recipe: `ablation` or `semi_supervised`.
    Experiment {
        #[arg(long)]
        recipe: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Base seed (seeds used: seed, seed+1, seed+2 per row).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Io { .. } => 1,
                Error::Config(_) | Error::Data(_) => 2,
                Error::Numerical(_) | Error::Autodiff(_) => 3,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { config, out } => cmd_gen(&config, &out),
        Command::Train { config, data, out } => cmd_train(&config, &data, &out),
        Command::Eval { ckpt, data, split } => cmd_eval(&ckpt, &data, &split),
        Command::Predict { ckpt, data, split, out } => cmd_predict(&ckpt, &data, &split, out.as_deref()),
        Command::Rankfit { ckpt, data, split, out } => cmd_rankfit(&ckpt, &data, &split, &out),
        Command::Experiment { recipe, data, out, seed, epochs } => {
            cmd_experiment(&recipe, &data, &out, seed, epochs)
        }
    }
}

/// Reads a JSON config; a missing or malformed file is a usage error, not an
/// I/O error, so scripts can distinguish it from dataset write failures.
fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: invalid config: {e}", path.display())))
}

/// DUALBIND_SEED overrides whatever seed the config carries.
fn seed_override() -> Result<Option<u64>> {
    match std::env::var("DUALBIND_SEED") {
        Ok(s) => s
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::Config(format!("DUALBIND_SEED must be a non-negative integer, got {s:?}"))),
        Err(_) => Ok(None),
    }
}

fn load_data(dir: &Path) -> Result<(Vec<Complex>, Manifest)> {
    let data = load_dataset(dir.join("dataset.jsonl"))?;
    let manifest = Manifest::load(dir.join("manifest.json"))?;
    Ok((data, manifest))
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!("unknown split {other:?} (expected train|val|test)"))),
    }
}

fn cmd_gen(config: &Path, out: &Path) -> Result<()> {
    let mut cfg: GenConfig = read_config(config)?;
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    let (complexes, manifest, _) = generate_dataset(&cfg)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    save_dataset(out.join("dataset.jsonl"), &complexes)?;
    manifest.save(out.join("manifest.json"))?;

    let labels: Vec<f64> = complexes.iter().filter_map(|c| c.affinity).collect();
    let mean = labels.iter().sum::<f64>() / labels.len() as f64;
    let var = labels.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / labels.len() as f64;
    let min = labels.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = labels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!("generated {} complexes (seed {})", complexes.len(), cfg.seed);
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("  {:?}: {}", split, manifest.ids_in_split(split).len());
    }
    println!(
        "  labels: mean {:.4}  std {:.4}  min {:.4}  max {:.4}",
        mean,
        var.sqrt(),
        min,
        max
    );
    Ok(())
}

fn cmd_train(config: &Path, data_dir: &Path, out: &Path) -> Result<()> {
    let mut cfg: TrainConfig = read_config(config)?;
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    let (data, manifest) = load_data(data_dir)?;
    let outcome = train(&cfg, &data, &manifest, out)?;
    let summary = serde_json::json!({
        "mode": cfg.mode.as_str(),
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "best_epoch": outcome.best_epoch,
        "best_val_pearson": outcome.best_val_pearson,
        "checkpoint": outcome.checkpoint_path,
        "metrics_csv": out.join("metrics.csv"),
    });
    let summary_path = out.join("summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary).expect("summary serializes"))
        .map_err(|e| Error::io(summary_path.display().to_string(), e))?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

fn cmd_eval(ckpt: &Path, data_dir: &Path, split: &str) -> Result<()> {
    let split = parse_split(split)?;
    let (model, mode) = load_checkpoint(ckpt)?;
    let (data, manifest) = load_data(data_dir)?;
    let subset = dualbind::data::split_complexes(&manifest, &data, split)?;
    // RMSE is meaningless for dsm_only checkpoints: their outputs rank but
    // are not calibrated to the label scale
    let with_rmse = mode != "dsm_only";
    let report = evaluate(&model, &subset, with_rmse)?;
    println!("{report}");
    Ok(())
}

fn cmd_predict(ckpt: &Path, data_dir: &Path, split: &str, out: Option<&Path>) -> Result<()> {
    let split = parse_split(split)?;
    let (model, _) = load_checkpoint(ckpt)?;
    let (data, manifest) = load_data(data_dir)?;
    let subset = dualbind::data::split_complexes(&manifest, &data, split)?;
    let mut csv = String::from("id,prediction\n");
    for c in &subset {
        let (pred, no_pairs) = model.predict(c)?;
        if no_pairs {
            eprintln!("warning: {}: no protein-ligand pairs within cutoff", c.id);
        }
        csv.push_str(&format!("{},{:.6}\n", c.id, pred));
    }
    match out {
        Some(path) => {
            std::fs::write(path, csv).map_err(|e| Error::io(path.display().to_string(), e))?
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_rankfit(ckpt: &Path, data_dir: &Path, split: &str, out: &Path) -> Result<()> {
    let split = parse_split(split)?;
    let (model, _) = load_checkpoint(ckpt)?;
    let (data, manifest) = load_data(data_dir)?;
    let subset = dualbind::data::split_complexes(&manifest, &data, split)?;
    let fit = rank_fit(&model, &subset)?;
    fit.save_csv(out)?;
    println!("rank-fit spearman: {:.4} ({} complexes) -> {}", fit.spearman, fit.rows.len(), out.display());
    Ok(())
}

/// Shared base config for the canned recipes: a small model so the 9 seed
/// runs of a recipe finish quickly while leaving the comparison directions
/// intact.
fn recipe_base(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        seed,
        epochs,
        learning_rate: 3e-3,
        model: dualbind::energy::ModelConfig {
            hidden: 8,
            layers: 1,
            pair_hidden: 8,
            cutoff: 10.0,
        },
        ..TrainConfig::default()
    }
}

fn cmd_experiment(recipe: &str, data_dir: &Path, out: &Path, seed: u64, epochs: usize) -> Result<()> {
    let seed = seed_override()?.unwrap_or(seed);
    let (data, manifest) = load_data(data_dir)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let base = recipe_base(seed, epochs);
    let rows: Vec<(&str, TrainConfig)> = match recipe {
        "ablation" => vec![
            ("dual", TrainConfig { mode: Mode::Dual, ..base.clone() }),
            ("mse_only", TrainConfig { mode: Mode::MseOnly, ..base.clone() }),
            ("dsm_only", TrainConfig { mode: Mode::DsmOnly, ..base }),
        ],
        "semi_supervised" => vec![
            (
                "mse_only_50",
                TrainConfig { mode: Mode::MseOnly, labeled_fraction: 0.5, ..base.clone() },
            ),
            (
                "dual_50_plus_unlabeled",
                TrainConfig { mode: Mode::Dual, labeled_fraction: 0.5, ..base.clone() },
            ),
            ("mse_only_100", TrainConfig { mode: Mode::MseOnly, ..base }),
        ],
        other => {
            return Err(Error::Config(format!(
                "unknown recipe {other:?} (expected ablation|semi_supervised)"
            )))
        }
    };
    let mut results = Vec::new();
    for (label, cfg) in &rows {
        eprintln!("running {label} (seeds {}..={})", cfg.seed, cfg.seed + 2);
        results.push(run_experiment(label, cfg, &data, &manifest, out)?);
    }
    let table = experiment_table(&results);
    let table_path = out.join("table.csv");
    std::fs::write(&table_path, &table).map_err(|e| Error::io(table_path.display().to_string(), e))?;
    print!("{table}");
    Ok(())
}
