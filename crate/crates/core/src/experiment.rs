//! Experiment orchestration: cohort loading, repeated cross-validation with
//! optional Bayesian tuning, external validation and pooled training.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::cohort::{
    build_task_cohort, read_cohort, write_cohort, AttritionReport, CohortBundle, CohortError, CohortFormat,
    CohortOptions,
};
use crate::frame::{ColumnData, Frame, FrameError};
use crate::harmonize::{parse_concept_dictionary, Dataset, HarmonizeError};
use crate::labelers::{TaskId, TaskMode};
use crate::metrics::{aggregate, CalibrationBin, CurvePoint, MeanStd, MetricReport};
use crate::models::{train, EvalSet, Hyperparams, Matrix, ModelError, ModelKind, TrainedModel};
use crate::recipes::{FittedRecipe, Recipe, RecipeData, RecipeError};
use crate::tuner::{bayes_optimize, make_splits, sub_seed, BayesConfig, ParamDistribution, Point, SearchSpace, TunerError};

pub const RESULTS_FILE: &str = "results.json";
pub const ATTRITION_FILE: &str = "attrition.json";
pub const RUN_INFO_FILE: &str = "run_info.json";
pub const TRIALS_FILE: &str = "trials.jsonl";
pub const MODELS_DIR: &str = "models";
pub const CONCEPTS_FILE: &str = "concepts.json";
const CACHE_DIR: &str = "cache";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("model {model} does not support {mode:?} tasks ({task})")]
    Mode {
        model: ModelKind,
        task: TaskId,
        mode: TaskMode,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ExperimentError {
    /// Process exit code: 2 for configuration problems, 3 for data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) | ExperimentError::Mode { .. } => 2,
            ExperimentError::Data(_) | ExperimentError::Io { .. } => 3,
        }
    }
}

impl From<CohortError> for ExperimentError {
    fn from(e: CohortError) -> Self {
        match e {
            CohortError::Io(source) => ExperimentError::Io {
                path: "cohort".into(),
                source,
            },
            other => ExperimentError::Data(other.to_string()),
        }
    }
}

impl From<HarmonizeError> for ExperimentError {
    fn from(e: HarmonizeError) -> Self {
        match e {
            HarmonizeError::Parse { .. }
            | HarmonizeError::Schema { .. }
            | HarmonizeError::DuplicateConcept(_)
            | HarmonizeError::MissingIdLevel(_)
            | HarmonizeError::DanglingReference { .. }
            | HarmonizeError::NoTables => ExperimentError::Config(e.to_string()),
            other => ExperimentError::Data(other.to_string()),
        }
    }
}

impl From<RecipeError> for ExperimentError {
    fn from(e: RecipeError) -> Self {
        match e {
            RecipeError::UnknownColumn { .. } | RecipeError::BadWidth(_) => ExperimentError::Config(e.to_string()),
            other => ExperimentError::Data(other.to_string()),
        }
    }
}

impl From<FrameError> for ExperimentError {
    fn from(e: FrameError) -> Self {
        ExperimentError::Data(e.to_string())
    }
}

impl From<ModelError> for ExperimentError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Param(_) => ExperimentError::Config(e.to_string()),
            other => ExperimentError::Data(other.to_string()),
        }
    }
}

impl From<TunerError> for ExperimentError {
    fn from(e: TunerError) -> Self {
        match e {
            TunerError::AllFailed => ExperimentError::Data(e.to_string()),
            other => ExperimentError::Config(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_text(path: &Path) -> Result<String, ExperimentError> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), ExperimentError> {
    std::fs::write(path, text).map_err(io_err(path))
}

/// Repeated cross-validation and tuning budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub folds: usize,
    pub repetitions: usize,
    /// Folds of the first repetition used to score tuning trials.
    pub folds_to_tune: usize,
    pub n_init: usize,
    pub n_calls: usize,
    /// Worker threads for fold-level parallelism; 0 uses all cores.
    pub workers: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            folds: 5,
            repetitions: 5,
            folds_to_tune: 3,
            n_init: 10,
            n_calls: 50,
            workers: 0,
        }
    }
}

/// Training on several datasets at once, validated on a held-out one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PooledSource {
    pub name: String,
    pub data_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PooledConfig {
    pub sources: Vec<PooledSource>,
    pub holdout: String,
    /// Stays drawn from each training dataset; defaults to the smallest one.
    #[serde(default)]
    pub stays_per_dataset: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// A raw source directory (with `source.json`) or a cohort directory.
    pub data_dir: PathBuf,
    pub dataset: String,
    /// Concept dictionary for raw sources; defaults to `concepts.json` in `data_dir`.
    pub concepts: Option<PathBuf>,
    pub task: TaskId,
    /// Declared task type; must agree with the task when given.
    pub task_mode: Option<TaskMode>,
    pub cohort: CohortOptions,
    /// Preprocessing steps; the default chain when absent.
    pub recipe: Option<Recipe>,
    pub model: ModelKind,
    /// Fixed hyperparameters overriding the model defaults.
    pub hyperparams: serde_json::Map<String, Value>,
    pub tune: bool,
    /// Search space; the model's default space when absent.
    pub search_space: Option<SearchSpace>,
    pub cv: CvConfig,
    pub seed: u64,
    pub log_dir: PathBuf,
    pub load_cache: bool,
    pub generate_cache: bool,
    /// Run directory whose tuned hyperparameters are reused.
    pub checkpoint: Option<PathBuf>,
    pub pooled: Option<PooledConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data_dir: PathBuf::from("data"),
            dataset: String::new(),
            concepts: None,
            task: TaskId::Mortality,
            task_mode: None,
            cohort: CohortOptions::default(),
            recipe: None,
            model: ModelKind::LogisticRegression,
            hyperparams: serde_json::Map::new(),
            tune: false,
            search_space: None,
            cv: CvConfig::default(),
            seed: 1111,
            log_dir: PathBuf::from("logs"),
            load_cache: false,
            generate_cache: false,
            checkpoint: None,
            pooled: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let mode = self.task.mode();
        if let Some(m) = self.task_mode {
            if m != mode {
                return Err(ExperimentError::Config(format!(
                    "task {} is a {mode:?} task, but {m:?} was requested",
                    self.task
                )));
            }
        }
        if !self.model.supports(mode) {
            return Err(ExperimentError::Mode {
                model: self.model,
                task: self.task,
                mode,
            });
        }
        let cv = &self.cv;
        if cv.folds < 3 {
            return Err(TunerError::TooFewFolds(cv.folds).into());
        }
        if cv.repetitions == 0 {
            return Err(TunerError::NoRepetitions.into());
        }
        if cv.folds_to_tune == 0 || cv.folds_to_tune > cv.folds {
            return Err(ExperimentError::Config(format!(
                "folds_to_tune must be between 1 and {}",
                cv.folds
            )));
        }
        if self.tune && (cv.n_init == 0 || cv.n_init > cv.n_calls) {
            return Err(TunerError::Budget {
                n_init: cv.n_init,
                n_calls: cv.n_calls,
            }
            .into());
        }
        Hyperparams::with_overrides(self.model, &self.hyperparams)?;
        if self.tune {
            let space = self.space();
            crate::tuner::validate_space(&space)?;
            let probe: Point = space.iter().map(|(k, d)| (k.clone(), d.from_unit(0.5))).collect();
            self.hyperparams_at(&probe)?;
        }
        self.cohort.sepsis.validate().map_err(ExperimentError::Config)?;
        Ok(())
    }

    pub fn space(&self) -> SearchSpace {
        self.search_space.clone().unwrap_or_else(|| default_space(self.model))
    }

    /// Model hyperparameters with the fixed overrides and then `point` applied.
    pub fn hyperparams_at(&self, point: &Point) -> Result<Hyperparams, ExperimentError> {
        let mut merged = self.hyperparams.clone();
        merged.extend(point.iter().map(|(k, v)| (k.clone(), v.clone())));
        Ok(Hyperparams::with_overrides(self.model, &merged)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("experiment config serializes")
    }
}

/// Parses a TOML or JSON experiment config. Unknown keys are rejected with
/// their path.
pub fn parse_experiment_config(text: &str) -> Result<ExperimentConfig, ExperimentError> {
    let trimmed = text.trim_start();
    let cfg: ExperimentConfig = if trimmed.starts_with('{') {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| ExperimentError::Config(format!("at `{}`: {}", e.path(), e.inner())))?
    } else {
        let de = toml::Deserializer::parse(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| ExperimentError::Config(format!("at `{}`: {}", e.path(), e.inner())))?
    };
    Ok(cfg)
}

pub fn parse_task_mode(s: &str) -> Result<TaskMode, ExperimentError> {
    match s.to_ascii_lowercase().as_str() {
        "classification" | "binaryclassification" => Ok(TaskMode::Classification),
        "regression" => Ok(TaskMode::Regression),
        _ => Err(ExperimentError::Config(format!(
            "unknown task type `{s}` (expected classification or regression)"
        ))),
    }
}

pub fn parse_task(s: &str) -> Result<TaskId, ExperimentError> {
    TaskId::from_str(s).map_err(|e| ExperimentError::Config(e.to_string()))
}

pub fn parse_model(s: &str) -> Result<ModelKind, ExperimentError> {
    ModelKind::from_str(s).map_err(ExperimentError::Config)
}

/// Search spaces of the classical models.
pub fn default_space(model: ModelKind) -> SearchSpace {
    use ParamDistribution::*;
    let mut s = SearchSpace::new();
    match model {
        ModelKind::LogisticRegression => {
            s.insert(
                "c".into(),
                LogUniform {
                    low: 1e-3,
                    high: 1e1,
                    integer: false,
                },
            );
            s.insert(
                "penalty".into(),
                Choice {
                    values: vec!["l1".into(), "l2".into(), "elasticnet".into()],
                },
            );
            s.insert("l1_ratio".into(), Uniform { low: 0.0, high: 1.0 });
        }
        ModelKind::ElasticNet => {
            s.insert(
                "alpha".into(),
                LogUniform {
                    low: 1e-2,
                    high: 1e1,
                    integer: false,
                },
            );
            s.insert(
                "tol".into(),
                LogUniform {
                    low: 1e-5,
                    high: 1e-1,
                    integer: false,
                },
            );
            s.insert("l1_ratio".into(), Uniform { low: 0.0, high: 1.0 });
        }
        ModelKind::Gbt => {
            s.insert("colsample".into(), Uniform { low: 0.33, high: 1.0 });
            s.insert("subsample".into(), Uniform { low: 0.33, high: 1.0 });
            s.insert(
                "num_leaves".into(),
                LogUniform {
                    low: 8.0,
                    high: 128.0,
                    integer: true,
                },
            );
            s.insert("max_depth".into(), Randint { low: 3, high: 7 });
        }
    }
    s
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roc: Option<Vec<CurvePoint>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pr: Option<Vec<CurvePoint>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<Vec<CalibrationBin>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub repetition: usize,
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub metrics: BTreeMap<String, f64>,
    pub curves: Curves,
}

impl FoldResult {
    fn new(repetition: usize, fold: usize, n_train: usize, n_test: usize, report: MetricReport) -> Self {
        FoldResult {
            repetition,
            fold,
            n_train,
            n_test,
            metrics: report.scalars,
            curves: Curves {
                roc: report.roc,
                pr: report.pr,
                calibration: report.calibration,
            },
        }
    }

    fn report(&self) -> MetricReport {
        MetricReport {
            scalars: self.metrics.clone(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningSummary {
    pub best: Point,
    pub best_value: f64,
    pub n_trials: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRun {
    pub name: String,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub config: ExperimentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<SourceRun>,
    pub hyperparams: Hyperparams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuning: Option<TuningSummary>,
    pub folds: Vec<FoldResult>,
    pub aggregate: BTreeMap<String, MeanStd>,
    pub attrition: AttritionReport,
    /// Kept out of `results.json` so reruns compare equal.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl ResultRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result record serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|e| ExperimentError::Data(format!("invalid results file: {e}")))
    }

    /// Mean and population std of each scalar metric over the fold entries.
    pub fn recompute_aggregate(&self) -> BTreeMap<String, MeanStd> {
        aggregate(&self.folds.iter().map(FoldResult::report).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunInfo {
    pub wall_clock_seconds: f64,
    pub started: String,
    pub threads: usize,
}

/// A finished run and the directory its artifacts were written to.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: ResultRecord,
    pub dir: PathBuf,
}

/// A task cohort ready for modelling.
#[derive(Debug, Clone)]
pub struct LoadedCohort {
    pub bundle: CohortBundle,
    pub attrition: AttritionReport,
}

/// Loads the task cohort described by `cfg`, building it from a raw source
/// when `data_dir` holds a `source.json`.
pub fn load_cohort(cfg: &ExperimentConfig) -> Result<LoadedCohort, ExperimentError> {
    load_cohort_from(cfg, &cfg.data_dir)
}

fn load_cohort_from(cfg: &ExperimentConfig, data_dir: &Path) -> Result<LoadedCohort, ExperimentError> {
    let cache = data_dir.join(CACHE_DIR).join(cfg.task.name());
    let is_raw = data_dir.join(crate::harmonize::SOURCE_CONFIG_FILE).exists();
    let loaded = if !is_raw {
        read_cohort_dir(data_dir)?
    } else if cfg.load_cache && cache.join(crate::cohort::VARS_FILE).exists() {
        log::info!("loading cached cohort from {}", cache.display());
        read_cohort_dir(&cache)?
    } else {
        let ds = Dataset::open(data_dir)?;
        let dict_path = cfg.concepts.clone().unwrap_or_else(|| data_dir.join(CONCEPTS_FILE));
        let dict = parse_concept_dictionary(&read_text(&dict_path)?)?;
        let source_name = ds.cfg.name.clone();
        let cohort = build_task_cohort(&ds, &dict, &source_name, cfg.task, &cfg.cohort)?;
        let attrition = cohort.attrition();
        LoadedCohort {
            bundle: cohort.bundle,
            attrition,
        }
    };
    if is_raw && cfg.generate_cache {
        write_cohort(&loaded.bundle, &cache, CohortFormat::Parquet)?;
        write_text(&cache.join(ATTRITION_FILE), &loaded.attrition.to_json())?;
    }
    if loaded.bundle.is_hourly() == cfg.task.once_per_stay() {
        return Err(ExperimentError::Config(format!(
            "cohort in {} does not have the label layout of task {}",
            data_dir.display(),
            cfg.task
        )));
    }
    Ok(loaded)
}

fn read_cohort_dir(dir: &Path) -> Result<LoadedCohort, ExperimentError> {
    let bundle = read_cohort(dir)?;
    let path = dir.join(ATTRITION_FILE);
    let attrition = if path.exists() {
        serde_json::from_str(&read_text(&path)?).map_err(|e| ExperimentError::Data(e.to_string()))?
    } else {
        AttritionReport::default()
    };
    Ok(LoadedCohort { bundle, attrition })
}

/// Model inputs: one row per stay for once-per-stay tasks (the last processed
/// hour), one row per labelled hour otherwise.
#[derive(Debug, Clone)]
pub struct ModelInputs {
    pub x: Matrix,
    pub y: Vec<f64>,
    pub stays: Vec<i64>,
    pub feature_names: Vec<String>,
}

struct Labels {
    by_key: HashMap<(i64, Option<i64>), f64>,
}

impl Labels {
    fn new(bundle: &CohortBundle) -> Result<Self, ExperimentError> {
        let v = &bundle.vars;
        let ids = bundle.outcome.int(&v.group)?;
        let times = if bundle.is_hourly() {
            Some(bundle.outcome.int(&v.sequence)?)
        } else {
            None
        };
        let labels = bundle.outcome.float(&v.label)?;
        let mut by_key = HashMap::with_capacity(ids.len());
        for i in 0..ids.len() {
            if let Some(y) = labels[i] {
                by_key.insert((ids[i], times.map(|t| t[i])), y);
            }
        }
        Ok(Labels { by_key })
    }
}

fn model_inputs(data: &RecipeData, labels: &Labels, hourly: bool) -> Result<ModelInputs, ExperimentError> {
    if data.missing_predictor_cells() > 0 {
        return Err(ExperimentError::Config(
            "the recipe leaves missing values; add an imputation step".into(),
        ));
    }
    let cols: Vec<&[Option<f64>]> = data
        .predictors
        .iter()
        .map(|p| data.frame.float(p))
        .collect::<Result<_, _>>()?;
    let ids = data.ids();
    let times = data.times();
    let rows: Vec<(usize, i64, f64)> = if hourly {
        let times = times.ok_or_else(|| ExperimentError::Data("hourly task without a time column".into()))?;
        (0..ids.len())
            .filter_map(|i| labels.by_key.get(&(ids[i], Some(times[i]))).map(|&y| (i, ids[i], y)))
            .collect()
    } else {
        data.stays()
            .into_iter()
            .filter_map(|(id, r)| labels.by_key.get(&(id, None)).map(|&y| (r.end - 1, id, y)))
            .collect()
    };
    let n_cols = cols.len();
    let mut x = Vec::with_capacity(rows.len() * n_cols);
    for &(i, _, _) in &rows {
        x.extend(cols.iter().map(|c| c[i].unwrap_or(f64::NAN)));
    }
    Ok(ModelInputs {
        x: Matrix::new(rows.len(), n_cols, x),
        y: rows.iter().map(|r| r.2).collect(),
        stays: rows.iter().map(|r| r.1).collect(),
        feature_names: data.predictors.clone(),
    })
}

/// Recipe-processed train/val/test inputs of one split.
struct PreparedSplit {
    recipe: FittedRecipe,
    train: ModelInputs,
    val: ModelInputs,
    test: ModelInputs,
}

struct Experiment<'a> {
    cfg: &'a ExperimentConfig,
    data: RecipeData,
    labels: Labels,
    hourly: bool,
    recipe: Recipe,
}

impl<'a> Experiment<'a> {
    fn new(cfg: &'a ExperimentConfig, bundle: &CohortBundle) -> Result<Self, ExperimentError> {
        let data = RecipeData::from_bundle(bundle)?;
        let recipe = cfg
            .recipe
            .clone()
            .unwrap_or_else(|| Recipe::default_chain(&bundle.vars.dynamic, &bundle.vars.statics));
        Ok(Experiment {
            cfg,
            data,
            labels: Labels::new(bundle)?,
            hourly: bundle.is_hourly(),
            recipe,
        })
    }

    fn subset(&self, stays: &[i64]) -> RecipeData {
        let keep: HashSet<i64> = stays.iter().copied().collect();
        self.data.filter_stays(|s| keep.contains(&s))
    }

    fn prepare(&self, train: &[i64], val: &[i64], test: &[i64]) -> Result<PreparedSplit, ExperimentError> {
        let train_data = self.subset(train);
        let recipe = self.recipe.fit(&train_data)?;
        let inputs = |d: RecipeData| -> Result<ModelInputs, ExperimentError> {
            model_inputs(&recipe.apply(&d)?, &self.labels, self.hourly)
        };
        Ok(PreparedSplit {
            train: inputs(train_data)?,
            val: inputs(self.subset(val))?,
            test: inputs(self.subset(test))?,
            recipe,
        })
    }

    fn fit(&self, hp: &Hyperparams, split: &PreparedSplit) -> Result<TrainedModel, ModelError> {
        let eval = (split.val.x.n_rows > 0).then_some(EvalSet {
            x: &split.val.x,
            y: &split.val.y,
        });
        train(
            hp,
            &split.train.x,
            &split.train.y,
            self.cfg.task.mode(),
            &split.train.feature_names,
            eval,
        )
    }

    fn validation_loss(&self, hp: &Hyperparams, split: &PreparedSplit) -> f64 {
        let Ok(model) = self.fit(hp, split) else {
            return f64::NAN;
        };
        let Ok(pred) = model.predict(&split.val.x) else {
            return f64::NAN;
        };
        validation_loss(self.cfg.task.mode(), &pred, &split.val.y)
    }

    fn evaluate(&self, model: &TrainedModel, inputs: &ModelInputs) -> Result<MetricReport, ExperimentError> {
        let pred = model.predict(&inputs.x)?;
        Ok(match self.cfg.task.mode() {
            TaskMode::Classification => MetricReport::classification(&pred, &inputs.y),
            TaskMode::Regression => MetricReport::regression(&pred, &inputs.y),
        })
    }
}

/// Cross-entropy for classification, mean absolute error for regression.
pub fn validation_loss(mode: TaskMode, pred: &[f64], y: &[f64]) -> f64 {
    if y.is_empty() {
        return f64::NAN;
    }
    let n = y.len() as f64;
    match mode {
        TaskMode::Classification => {
            -pred
                .iter()
                .zip(y)
                .map(|(&p, &t)| {
                    let p = p.clamp(1e-15, 1.0 - 1e-15);
                    t * p.ln() + (1.0 - t) * (1.0 - p).ln()
                })
                .sum::<f64>()
                / n
        }
        TaskMode::Regression => crate::metrics::mae(pred, y),
    }
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool, ExperimentError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ExperimentError::Config(format!("cannot start worker pool: {e}")))
}

/// Tunes on the given prepared splits and returns the best hyperparameters.
fn tune(
    exp: &Experiment<'_>,
    splits: &[PreparedSplit],
    pool: &rayon::ThreadPool,
    out_dir: Option<&Path>,
) -> Result<(Hyperparams, TuningSummary), ExperimentError> {
    let cfg = exp.cfg;
    let space = cfg.space();
    let bayes = BayesConfig {
        n_init: cfg.cv.n_init,
        n_calls: cfg.cv.n_calls,
        seed: sub_seed(&[cfg.seed, 0x7475_6e65]),
        ..Default::default()
    };
    let folds: Vec<usize> = (0..splits.len()).collect();
    let opt = bayes_optimize(&space, &bayes, &folds, |point, seed| {
        let Ok(mut hp) = cfg.hyperparams_at(point) else {
            return f64::NAN;
        };
        hp.set_seed(seed);
        let losses: Vec<f64> = pool.install(|| splits.par_iter().map(|s| exp.validation_loss(&hp, s)).collect());
        losses.iter().sum::<f64>() / losses.len() as f64
    })?;
    if let Some(dir) = out_dir {
        let lines: Vec<String> = opt
            .trials
            .iter()
            .map(|t| serde_json::to_string(t).expect("trial serializes"))
            .collect();
        write_text(&dir.join(TRIALS_FILE), &(lines.join("\n") + "\n"))?;
    }
    let hp = cfg.hyperparams_at(&opt.best)?;
    let summary = TuningSummary {
        best: opt.best.clone(),
        best_value: opt.best_value,
        n_trials: opt.trials.len(),
        n_failed: opt.trials.iter().filter(|t| t.value.is_none()).count(),
    };
    Ok((hp, summary))
}

fn run_dir(log_dir: &Path, parts: &[&str]) -> Result<PathBuf, ExperimentError> {
    let mut base = log_dir.to_path_buf();
    for p in parts {
        base.push(p);
    }
    let stamp = chrono::Local::now().format("%Y-%m-%dT%H-%M-%S").to_string();
    let mut dir = base.join(&stamp);
    let mut k = 1;
    while dir.exists() {
        dir = base.join(format!("{stamp}_{k}"));
        k += 1;
    }
    std::fs::create_dir_all(dir.join(MODELS_DIR)).map_err(io_err(&dir))?;
    Ok(dir)
}

fn fold_stem(repetition: usize, fold: usize) -> String {
    format!("rep{repetition}_fold{fold}")
}

fn model_path(dir: &Path, repetition: usize, fold: usize) -> PathBuf {
    dir.join(MODELS_DIR).join(format!("{}.model.json", fold_stem(repetition, fold)))
}

fn recipe_path(dir: &Path, repetition: usize, fold: usize) -> PathBuf {
    dir.join(MODELS_DIR).join(format!("{}.recipe.json", fold_stem(repetition, fold)))
}

fn finish_run(dir: &Path, record: &mut ResultRecord, started: Instant, threads: usize) -> Result<(), ExperimentError> {
    record.aggregate = record.recompute_aggregate();
    record.wall_clock_seconds = started.elapsed().as_secs_f64();
    write_text(&dir.join(RESULTS_FILE), &record.to_json())?;
    write_text(&dir.join(ATTRITION_FILE), &record.attrition.to_json())?;
    let info = RunInfo {
        wall_clock_seconds: record.wall_clock_seconds,
        started: chrono::Local::now().to_rfc3339(),
        threads,
    };
    write_text(
        &dir.join(RUN_INFO_FILE),
        &serde_json::to_string_pretty(&info).expect("run info serializes"),
    )?;
    Ok(())
}

fn checkpoint_hyperparams(dir: &Path) -> Result<Hyperparams, ExperimentError> {
    Ok(ResultRecord::from_json(&read_text(&dir.join(RESULTS_FILE))?)?.hyperparams)
}

/// Tunes on the first repetition's leading folds (when requested), then fits
/// and evaluates on every split of the repeated cross-validation.
pub fn run_train(cfg: &ExperimentConfig) -> Result<RunOutput, ExperimentError> {
    cfg.validate()?;
    let started = Instant::now();
    let pool = thread_pool(cfg.cv.workers)?;
    let cohort = load_cohort(cfg)?;
    let exp = Experiment::new(cfg, &cohort.bundle)?;
    let plan = make_splits(cohort.bundle.stay_ids(), cfg.cv.folds, cfg.cv.repetitions, cfg.seed)?;
    let dir = run_dir(&cfg.log_dir, &[&cfg.dataset_label(), cfg.task.name(), cfg.model.name()])?;
    log::info!("run directory {}", dir.display());

    let (base_hp, tuning) = if let Some(ck) = &cfg.checkpoint {
        (checkpoint_hyperparams(ck)?, None)
    } else if cfg.tune {
        let tune_splits: Vec<PreparedSplit> = pool.install(|| {
            (0..cfg.cv.folds_to_tune)
                .into_par_iter()
                .map(|k| {
                    let s = plan.get(0, k);
                    exp.prepare(&s.train, &s.val, &s.test)
                })
                .collect::<Result<_, _>>()
        })?;
        let (hp, summary) = tune(&exp, &tune_splits, &pool, Some(&dir))?;
        log::info!("best validation loss {:.5} at {:?}", summary.best_value, summary.best);
        (hp, Some(summary))
    } else {
        (cfg.hyperparams_at(&Point::new())?, None)
    };

    let folds: Vec<FoldResult> = pool.install(|| {
        plan.splits
            .par_iter()
            .map(|s| -> Result<FoldResult, ExperimentError> {
                let prepared = exp.prepare(&s.train, &s.val, &s.test)?;
                let mut hp = base_hp.clone();
                hp.set_seed(sub_seed(&[cfg.seed, s.repetition as u64, s.fold as u64]));
                let model = exp.fit(&hp, &prepared)?;
                let report = exp.evaluate(&model, &prepared.test)?;
                write_text(&model_path(&dir, s.repetition, s.fold), &model.to_json())?;
                write_text(
                    &recipe_path(&dir, s.repetition, s.fold),
                    &serde_json::to_string(&prepared.recipe).expect("recipe serializes"),
                )?;
                Ok(FoldResult::new(
                    s.repetition,
                    s.fold,
                    prepared.train.x.n_rows,
                    prepared.test.x.n_rows,
                    report,
                ))
            })
            .collect::<Result<_, _>>()
    })?;

    let mut record = ResultRecord {
        config: cfg.clone(),
        source: None,
        hyperparams: base_hp,
        tuning,
        folds,
        aggregate: BTreeMap::new(),
        attrition: cohort.attrition,
        wall_clock_seconds: 0.0,
    };
    finish_run(&dir, &mut record, started, pool.current_num_threads())?;
    Ok(RunOutput { record, dir })
}

impl ExperimentConfig {
    fn dataset_label(&self) -> String {
        if self.dataset.is_empty() {
            self.data_dir
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into())
        } else {
            self.dataset.clone()
        }
    }
}

/// Evaluates the per-split models of a finished run on the test splits of the
/// target dataset in `cfg`, reusing the source recipe statistics.
pub fn run_evaluate(cfg: &ExperimentConfig, source_dir: &Path, source_name: &str) -> Result<RunOutput, ExperimentError> {
    cfg.validate()?;
    let started = Instant::now();
    let source = ResultRecord::from_json(&read_text(&source_dir.join(RESULTS_FILE))?)?;
    if source.config.task != cfg.task {
        return Err(ExperimentError::Config(format!(
            "source run was trained on task {}, not {}",
            source.config.task, cfg.task
        )));
    }
    let pool = thread_pool(cfg.cv.workers)?;
    let cohort = load_cohort(cfg)?;
    let exp = Experiment::new(cfg, &cohort.bundle)?;
    let plan = make_splits(cohort.bundle.stay_ids(), cfg.cv.folds, cfg.cv.repetitions, cfg.seed)?;
    let label = format!("{}_from_{}", cfg.dataset_label(), source_name);
    let dir = run_dir(&cfg.log_dir, &[&label, cfg.task.name(), source.config.model.name()])?;

    let mut available: Vec<(usize, usize)> = source.folds.iter().map(|f| (f.repetition, f.fold)).collect();
    available.sort_unstable();
    let folds: Vec<FoldResult> = pool.install(|| {
        available
            .par_iter()
            .filter(|&&(r, k)| r < plan.repetitions && k < plan.folds)
            .map(|&(r, k)| -> Result<FoldResult, ExperimentError> {
                let model = TrainedModel::from_json(&read_text(&model_path(source_dir, r, k))?)?;
                let recipe: FittedRecipe = serde_json::from_str(&read_text(&recipe_path(source_dir, r, k))?)
                    .map_err(|e| ExperimentError::Data(format!("invalid recipe file: {e}")))?;
                let test = exp.subset(&plan.get(r, k).test);
                let inputs = model_inputs(&recipe.apply(&test)?, &exp.labels, exp.hourly)?;
                if inputs.feature_names != model.feature_names {
                    return Err(ExperimentError::Data(format!(
                        "feature mismatch between model ({} features) and target cohort ({} features)",
                        model.feature_names.len(),
                        inputs.feature_names.len()
                    )));
                }
                let report = exp.evaluate(&model, &inputs)?;
                let n_train = source
                    .folds
                    .iter()
                    .find(|f| f.repetition == r && f.fold == k)
                    .map_or(0, |f| f.n_train);
                Ok(FoldResult::new(r, k, n_train, inputs.x.n_rows, report))
            })
            .collect::<Result<_, _>>()
    })?;
    if folds.is_empty() {
        return Err(ExperimentError::Data("no source fold matches the target split plan".into()));
    }
    let mut record = ResultRecord {
        config: cfg.clone(),
        source: Some(SourceRun {
            name: source_name.to_string(),
            dir: source_dir.to_path_buf(),
        }),
        hyperparams: source.hyperparams,
        tuning: None,
        folds,
        aggregate: BTreeMap::new(),
        attrition: cohort.attrition,
        wall_clock_seconds: 0.0,
    };
    finish_run(&dir, &mut record, started, pool.current_num_threads())?;
    Ok(RunOutput { record, dir })
}

/// Offset separating stay ids of different datasets in a pooled cohort.
const POOL_ID_STRIDE: i64 = 10_000_000_000;

fn remap_ids(frame: &Frame, key: &str, offset: i64) -> Result<Frame, FrameError> {
    let mut out = frame.clone();
    let ids: Vec<i64> = frame.int(key)?.iter().map(|&i| i + offset).collect();
    out.set(key, ColumnData::Int(ids))?;
    Ok(out)
}

/// Trains one model on equal-size samples of every source except the holdout
/// (80/20 train/validation split) and evaluates it on the whole holdout cohort.
pub fn run_pooled(cfg: &ExperimentConfig) -> Result<RunOutput, ExperimentError> {
    cfg.validate()?;
    let pooled = cfg
        .pooled
        .as_ref()
        .ok_or_else(|| ExperimentError::Config("pooled mode needs a `pooled` section".into()))?;
    if !pooled.sources.iter().any(|s| s.name == pooled.holdout) {
        return Err(ExperimentError::Config(format!(
            "holdout `{}` is not among the pooled sources",
            pooled.holdout
        )));
    }
    if pooled.sources.len() < 2 {
        return Err(ExperimentError::Config("pooled mode needs at least two datasets".into()));
    }
    let started = Instant::now();
    let pool = thread_pool(cfg.cv.workers)?;
    let mut training = Vec::new();
    let mut holdout = None;
    for src in &pooled.sources {
        let c = load_cohort_from(cfg, &src.data_dir)?;
        if src.name == pooled.holdout {
            holdout = Some(c);
        } else {
            training.push(c);
        }
    }
    let holdout = holdout.expect("checked above");
    let vars = holdout.bundle.vars.clone();
    if training.iter().any(|c| c.bundle.vars != vars) {
        return Err(ExperimentError::Data("pooled datasets have different variables".into()));
    }
    let smallest = training.iter().map(|c| c.bundle.stay_ids().len()).min().unwrap_or(0);
    let n_sub = pooled.stays_per_dataset.unwrap_or(smallest).min(smallest);
    if n_sub == 0 {
        return Err(ExperimentError::Data("a pooled training dataset has no stays".into()));
    }

    let mut parts = (Vec::new(), Vec::new(), Vec::new());
    for (i, c) in training.iter().enumerate() {
        let mut ids = c.bundle.stay_ids().to_vec();
        ids.sort_unstable();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(&[cfg.seed, 0x706f6f6c, i as u64])));
        let keep: HashSet<i64> = ids.into_iter().take(n_sub).collect();
        let b = c.bundle.subset(&keep);
        let offset = (i as i64 + 1) * POOL_ID_STRIDE;
        parts.0.push(remap_ids(&b.statics, &vars.group, offset)?);
        parts.1.push(remap_ids(&b.dynamic, &vars.group, offset)?);
        parts.2.push(remap_ids(&b.outcome, &vars.group, offset)?);
    }
    let combined = CohortBundle::new(
        Frame::concat(&parts.0)?,
        Frame::concat(&parts.1)?,
        Frame::concat(&parts.2)?,
        vars.clone(),
    )?;

    let mut ids = combined.stay_ids().to_vec();
    ids.sort_unstable();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(&[cfg.seed, 0x7370_6c69])));
    let n_train = ids.len() * 4 / 5;
    let (train_ids, val_ids) = ids.split_at(n_train);
    let mut train_ids = train_ids.to_vec();
    let mut val_ids = val_ids.to_vec();
    train_ids.sort_unstable();
    val_ids.sort_unstable();

    let exp = Experiment::new(cfg, &combined)?;
    let prepared = exp.prepare(&train_ids, &val_ids, &[])?;
    let dir = run_dir(
        &cfg.log_dir,
        &[&format!("pooled_{}", pooled.holdout), cfg.task.name(), cfg.model.name()],
    )?;
    let (mut hp, tuning) = if cfg.tune {
        let (hp, s) = tune(&exp, std::slice::from_ref(&prepared), &pool, Some(&dir))?;
        (hp, Some(s))
    } else {
        (cfg.hyperparams_at(&Point::new())?, None)
    };
    hp.set_seed(sub_seed(&[cfg.seed, 0, 0]));
    let model = exp.fit(&hp, &prepared)?;
    write_text(&model_path(&dir, 0, 0), &model.to_json())?;
    write_text(
        &recipe_path(&dir, 0, 0),
        &serde_json::to_string(&prepared.recipe).expect("recipe serializes"),
    )?;

    let target = Experiment::new(cfg, &holdout.bundle)?;
    let inputs = model_inputs(&prepared.recipe.apply(&target.data)?, &target.labels, target.hourly)?;
    let report = target.evaluate(&model, &inputs)?;
    let mut record = ResultRecord {
        config: cfg.clone(),
        source: None,
        hyperparams: hp,
        tuning,
        folds: vec![FoldResult::new(0, 0, prepared.train.x.n_rows, inputs.x.n_rows, report)],
        aggregate: BTreeMap::new(),
        attrition: holdout.attrition,
        wall_clock_seconds: 0.0,
    };
    finish_run(&dir, &mut record, started, pool.current_num_threads())?;
    Ok(RunOutput { record, dir })
}

/// Builds a task cohort from a raw source and writes it with its attrition.
pub fn run_extract(cfg: &ExperimentConfig, out_dir: &Path, format: CohortFormat) -> Result<LoadedCohort, ExperimentError> {
    cfg.cohort.sepsis.validate().map_err(ExperimentError::Config)?;
    if !cfg.data_dir.join(crate::harmonize::SOURCE_CONFIG_FILE).exists() {
        return Err(ExperimentError::Config(format!(
            "{} is not a raw source directory (no source.json)",
            cfg.data_dir.display()
        )));
    }
    let cohort = load_cohort(cfg)?;
    write_cohort(&cohort.bundle, out_dir, format)?;
    write_text(&out_dir.join(ATTRITION_FILE), &cohort.attrition.to_json())?;
    Ok(cohort)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse_experiment_config("task = \"sepsis\"\nmodel = \"GBT\"\n").unwrap();
        assert_eq!(cfg.task, TaskId::Sepsis);
        assert_eq!(cfg.model, ModelKind::Gbt);
        assert_eq!(cfg.cv, CvConfig::default());
        let json = parse_experiment_config("{\"task\": \"aki\"}").unwrap();
        assert_eq!(json.task, TaskId::Aki);
    }

    #[test]
    fn unknown_key_reports_path() {
        let err = parse_experiment_config("[cv]\nfolds = 5\nfoldz = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("cv") && msg.contains("foldz"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn config_round_trips_through_toml_and_json() {
        let mut cfg = ExperimentConfig {
            dataset: "synth".into(),
            task: TaskId::Los,
            model: ModelKind::ElasticNet,
            tune: true,
            ..Default::default()
        };
        cfg.hyperparams.insert("l1_ratio".into(), Value::from(1.0));
        cfg.cv.n_calls = 20;
        cfg.search_space = Some(default_space(ModelKind::ElasticNet));
        assert_eq!(parse_experiment_config(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(parse_experiment_config(&serde_json::to_string(&cfg).unwrap()).unwrap(), cfg);
    }

    #[test]
    fn incompatible_model_is_a_mode_error() {
        let cfg = ExperimentConfig {
            task: TaskId::Mortality,
            model: ModelKind::ElasticNet,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(ExperimentError::Mode { .. })));
        let cfg = ExperimentConfig {
            task: TaskId::Los,
            task_mode: Some(TaskMode::Classification),
            model: ModelKind::Gbt,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(ExperimentError::Config(_))));
    }

    #[test]
    fn default_spaces_map_onto_hyperparameters() {
        for kind in ModelKind::ALL {
            let task = if kind == ModelKind::ElasticNet { TaskId::Los } else { TaskId::Mortality };
            let cfg = ExperimentConfig {
                task,
                model: kind,
                tune: true,
                ..Default::default()
            };
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn unknown_model_lists_available() {
        let err = parse_model("svm").unwrap_err();
        assert!(err.to_string().contains("LR, EN, GBT"));
    }

    #[test]
    fn validation_loss_matches_hand_values() {
        let ce = validation_loss(TaskMode::Classification, &[0.8, 0.3], &[1.0, 0.0]);
        assert!((ce - (-(0.8f64.ln() + 0.7f64.ln()) / 2.0)).abs() < 1e-12);
        assert_eq!(validation_loss(TaskMode::Regression, &[1.0, 4.0], &[2.0, 2.0]), 1.5);
    }
}
