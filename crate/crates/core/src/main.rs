use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use icubench::cohort::CohortFormat;
use icubench::experiment::{
    parse_experiment_config, parse_model, parse_task, parse_task_mode, run_evaluate, run_extract, run_pooled,
    run_train, ExperimentConfig, ExperimentError, ResultRecord,
};
use icubench::synthgen::{generate, SynthConfig, SynthError};

/// Cohort extraction, labelling and classical-model benchmarking for ICU data.
#[derive(Parser)]
#[command(name = "icubench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic source dataset with planted labels.
    Generate(GenerateArgs),
    /// Build a task cohort from a raw source and write it to disk.
    Extract(ExtractArgs),
    /// Cross-validate (and optionally tune) a model on one dataset.
    Train(TrainArgs),
    /// Evaluate trained models on another dataset without refitting.
    Evaluate(EvaluateArgs),
    /// Train on several datasets and evaluate on a held-out one.
    Pooled(TrainArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
    /// Number of stays.
    #[arg(short = 'n', long)]
    n_stays: Option<usize>,
    #[arg(short, long)]
    seed: Option<u64>,
    /// Generator config (TOML or JSON).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Experiment config (TOML or JSON); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Raw source directory (with source.json) or cohort directory.
    #[arg(short = 'd', long = "data-dir")]
    data_dir: Option<PathBuf>,
    /// Name of the (target) dataset.
    #[arg(short = 'n', long)]
    name: Option<String>,
    /// Task type (classification, regression) or task name.
    #[arg(short = 't', long)]
    task: Option<String>,
    /// Task name: mortality, aki, kdigo, sepsis, kf or los.
    #[arg(long = "task-name")]
    task_name: Option<String>,
    /// Concept dictionary for raw sources.
    #[arg(long)]
    concepts: Option<PathBuf>,
    #[arg(short, long)]
    seed: Option<u64>,
    /// Load the cohort cache generated by an earlier run.
    #[arg(long = "load-cache")]
    load_cache: bool,
    /// Write the built cohort to a cache.
    #[arg(long = "generate-cache")]
    generate_cache: bool,
}

#[derive(Args)]
struct ExtractArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output cohort directory.
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value = "parquet", value_parser = parse_format)]
    format: CohortFormat,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Model: LR, EN or GBT.
    #[arg(short, long)]
    model: Option<String>,
    /// Log directory.
    #[arg(short = 'l', long = "log-dir")]
    log_dir: Option<PathBuf>,
    /// Find the best hyperparameters.
    #[arg(long)]
    tune: bool,
    /// Hyperparameter override as key=value; repeatable.
    #[arg(long = "hyperparams", value_name = "KEY=VALUE")]
    hyperparams: Vec<String>,
    /// Reuse the hyperparameters of a previous run directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Worker threads for folds (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Name of the source dataset.
    #[arg(long = "source-name")]
    source_name: String,
    /// Run directory holding the source models.
    #[arg(long = "source-dir")]
    source_dir: PathBuf,
}

fn parse_format(s: &str) -> Result<CohortFormat, String> {
    match s {
        "parquet" => Ok(CohortFormat::Parquet),
        "csv" => Ok(CohortFormat::Csv),
        _ => Err(format!("unknown format `{s}` (expected parquet or csv)")),
    }
}

/// Rewrites the multi-letter short flags to their long forms.
fn normalize_args(args: impl Iterator<Item = String>) -> Vec<String> {
    args.map(|a| {
        let long = match a.as_str() {
            "-tn" => "--task-name",
            "-hp" => "--hyperparams",
            "-sn" => "--source-name",
            "-lc" => "--load-cache",
            "-gc" => "--generate-cache",
            _ => return a,
        };
        long.to_string()
    })
    .collect()
}

fn read_file(path: &Path) -> Result<String, ExperimentError> {
    std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_override(kv: &str) -> Result<(String, Value), ExperimentError> {
    let (k, v) = kv
        .split_once('=')
        .ok_or_else(|| ExperimentError::Config(format!("hyperparameter `{kv}` is not KEY=VALUE")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

fn apply_common(cfg: &mut ExperimentConfig, a: &CommonArgs) -> Result<(), ExperimentError> {
    if let Some(d) = &a.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(n) = &a.name {
        cfg.dataset = n.clone();
    }
    if let Some(t) = &a.task {
        match parse_task(t) {
            Ok(task) => cfg.task = task,
            Err(_) => cfg.task_mode = Some(parse_task_mode(t)?),
        }
    }
    if let Some(t) = &a.task_name {
        cfg.task = parse_task(t)?;
    }
    if let Some(c) = &a.concepts {
        cfg.concepts = Some(c.clone());
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.load_cache |= a.load_cache;
    cfg.generate_cache |= a.generate_cache;
    Ok(())
}

fn base_config(path: Option<&Path>) -> Result<ExperimentConfig, ExperimentError> {
    match path {
        Some(p) => parse_experiment_config(&read_file(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn train_config(a: &TrainArgs) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = base_config(a.common.config.as_deref())?;
    apply_common(&mut cfg, &a.common)?;
    if let Some(m) = &a.model {
        cfg.model = parse_model(m)?;
    }
    if let Some(l) = &a.log_dir {
        cfg.log_dir = l.clone();
    }
    cfg.tune |= a.tune;
    for kv in &a.hyperparams {
        let (k, v) = parse_override(kv)?;
        cfg.hyperparams.insert(k, v);
    }
    if let Some(c) = &a.checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    if let Some(w) = a.workers {
        cfg.cv.workers = w;
    }
    Ok(cfg)
}

fn report(record: &ResultRecord, dir: &Path) {
    println!("run directory: {}", dir.display());
    println!("folds: {}", record.folds.len());
    if let Some(t) = &record.tuning {
        println!(
            "tuning: best validation loss {:.5} after {} trials",
            t.best_value, t.n_trials
        );
    }
    for (metric, ms) in &record.aggregate {
        println!("{metric}: {:.4} ± {:.4}", ms.mean, ms.std);
    }
}

fn synth_error(e: SynthError) -> ExperimentError {
    match e {
        SynthError::Config(m) => ExperimentError::Config(m),
        SynthError::Io { path, source } => ExperimentError::Io { path, source },
        other => ExperimentError::Data(other.to_string()),
    }
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Generate(a) => {
            let mut cfg: SynthConfig = match &a.config {
                Some(p) => {
                    let text = read_file(p)?;
                    if text.trim_start().starts_with('{') {
                        serde_json::from_str(&text).map_err(|e| ExperimentError::Config(e.to_string()))?
                    } else {
                        toml::from_str(&text).map_err(|e| ExperimentError::Config(e.to_string()))?
                    }
                }
                None => SynthConfig::default(),
            };
            if let Some(n) = a.n_stays {
                cfg.n_stays = n;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let out = generate(&cfg).map_err(synth_error)?;
            out.write(&a.out).map_err(synth_error)?;
            println!("wrote {} stays to {}", out.truth.stays.len(), a.out.display());
            if let Some(c) = out.truth.bayes_ceiling_auroc {
                println!("mortality Bayes-ceiling AUROC: {c:.4}");
            }
        }
        Command::Extract(a) => {
            let mut cfg = base_config(a.common.config.as_deref())?;
            apply_common(&mut cfg, &a.common)?;
            let cohort = run_extract(&cfg, &a.out, a.format)?;
            println!(
                "wrote {} stays for task {} to {}",
                cohort.bundle.stay_ids().len(),
                cfg.task,
                a.out.display()
            );
            for s in &cohort.attrition.steps {
                println!("{:<28} {:>7} -> {:>7} (-{})", s.criterion, s.n_before, s.n_after, s.n_excluded);
            }
        }
        Command::Train(a) => {
            let out = run_train(&train_config(&a)?)?;
            report(&out.record, &out.dir);
        }
        Command::Evaluate(a) => {
            let cfg = train_config(&a.train)?;
            let out = run_evaluate(&cfg, &a.source_dir, &a.source_name)?;
            report(&out.record, &out.dir);
        }
        Command::Pooled(a) => {
            let out = run_pooled(&train_config(&a)?)?;
            report(&out.record, &out.dir);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse_from(normalize_args(std::env::args()));
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
