//! Python bindings: synthetic data, cohorts, models, metrics, the optimizer
//! and the train/evaluate experiment drivers.
//!
//! Structured values (configs, results, attrition) cross the boundary as JSON
//! and arrive in Python as plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use icubench::cohort::{read_cohort, write_cohort, AttritionReport, CohortBundle, CohortFormat};
use icubench::experiment::{
    load_cohort, parse_experiment_config, parse_model, parse_task_mode, run_evaluate, run_train, ExperimentConfig,
    ExperimentError, RunOutput,
};
use icubench::frame::{ColumnData, Frame};
use icubench::labelers::{kdigo_stage as stage_at, KdigoInputs};
use icubench::metrics::{self, CALIBRATION_BINS};
use icubench::models::{self, Hyperparams, Matrix, TrainedModel};
use icubench::synthgen::{generate as synth_generate, SynthConfig};
use icubench::tuner::{self, BayesConfig, SearchSpace};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn experiment_err(e: ExperimentError) -> PyErr {
    match e {
        ExperimentError::Io { .. } => PyIOError::new_err(e.to_string()),
        other => value_err(other),
    }
}

fn json_loads<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn json_dumps(obj: &Bound<'_, PyAny>) -> PyResult<String> {
    obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()
}

/// Accepts a dict (serialized to JSON) or a TOML/JSON string.
fn config_from(obj: &Bound<'_, PyAny>) -> PyResult<ExperimentConfig> {
    let text: String = if obj.is_instance_of::<PyDict>() {
        json_dumps(obj)?
    } else {
        obj.extract()?
    };
    parse_experiment_config(&text).map_err(experiment_err)
}

fn run_to_py<'py>(py: Python<'py>, out: RunOutput) -> PyResult<Bound<'py, PyAny>> {
    let d = PyDict::new(py);
    d.set_item("run_dir", out.dir.display().to_string())?;
    d.set_item("record", json_loads(py, &out.record.to_json())?)?;
    Ok(d.into_any())
}

fn parse_format(format: &str) -> PyResult<CohortFormat> {
    match format {
        "parquet" => Ok(CohortFormat::Parquet),
        "csv" => Ok(CohortFormat::Csv),
        _ => Err(value_err(format!("unknown format `{format}` (expected parquet or csv)"))),
    }
}

fn frame_to_py<'py>(py: Python<'py>, frame: &Frame) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for c in frame.columns() {
        match &c.data {
            ColumnData::Int(v) => d.set_item(&c.name, v)?,
            ColumnData::Float(v) => d.set_item(&c.name, v)?,
        }
    }
    Ok(d)
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(value_err("rows have different lengths"));
    }
    Ok(Matrix::from_rows(&rows))
}

/// Writes a synthetic source dataset and returns a summary.
#[pyfunction]
#[pyo3(signature = (out_dir, n_stays=None, seed=None, config=None))]
fn generate<'py>(
    py: Python<'py>,
    out_dir: PathBuf,
    n_stays: Option<usize>,
    seed: Option<u64>,
    config: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg: SynthConfig = match config {
        Some(c) => serde_json::from_str(&json_dumps(c)?).map_err(value_err)?,
        None => SynthConfig::default(),
    };
    if let Some(n) = n_stays {
        cfg.n_stays = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = synth_generate(&cfg).map_err(value_err)?;
    out.write(&out_dir).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("n_stays", out.truth.stays.len())?;
    d.set_item("bayes_ceiling_auroc", out.truth.bayes_ceiling_auroc)?;
    Ok(d.into_any())
}

/// STATIC, DYNAMIC and OUTCOME tables of one task cohort.
#[pyclass(module = "pyicubench")]
struct Cohort {
    bundle: CohortBundle,
    attrition: AttritionReport,
}

#[pymethods]
impl Cohort {
    /// Builds (or loads) the cohort an experiment config points at.
    #[staticmethod]
    fn load(config: &Bound<'_, PyAny>) -> PyResult<Cohort> {
        let loaded = load_cohort(&config_from(config)?).map_err(experiment_err)?;
        Ok(Cohort {
            bundle: loaded.bundle,
            attrition: loaded.attrition,
        })
    }

    #[staticmethod]
    fn read(dir: PathBuf) -> PyResult<Cohort> {
        let bundle = read_cohort(&dir).map_err(value_err)?;
        Ok(Cohort {
            bundle,
            attrition: AttritionReport::default(),
        })
    }

    #[pyo3(signature = (dir, format="parquet"))]
    fn write(&self, dir: PathBuf, format: &str) -> PyResult<()> {
        write_cohort(&self.bundle, &dir, parse_format(format)?).map_err(value_err)
    }

    #[getter]
    fn stay_ids(&self) -> Vec<i64> {
        self.bundle.stay_ids().to_vec()
    }

    #[getter]
    fn dynamic_columns(&self) -> Vec<String> {
        self.bundle.vars.dynamic.clone()
    }

    #[getter]
    fn static_columns(&self) -> Vec<String> {
        self.bundle.vars.statics.clone()
    }

    #[getter]
    fn is_hourly(&self) -> bool {
        self.bundle.is_hourly()
    }

    /// Attrition steps as a list of dicts; empty for cohorts read from disk.
    #[getter]
    fn attrition<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_loads(py, &self.attrition.to_json())
    }

    /// One of `static`, `dynamic` or `outcome`, as a dict of columns.
    fn table<'py>(&self, py: Python<'py>, name: &str) -> PyResult<Bound<'py, PyDict>> {
        let frame = match name {
            "static" => &self.bundle.statics,
            "dynamic" => &self.bundle.dynamic,
            "outcome" => &self.bundle.outcome,
            _ => return Err(value_err(format!("unknown table `{name}`"))),
        };
        frame_to_py(py, frame)
    }

    fn __len__(&self) -> usize {
        self.bundle.stay_ids().len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Cohort(stays={}, dynamic={}, static={}, hourly={})",
            self.bundle.stay_ids().len(),
            self.bundle.vars.dynamic.len(),
            self.bundle.vars.statics.len(),
            self.bundle.is_hourly()
        )
    }
}

/// A trained LR, EN or GBT model.
#[pyclass(module = "pyicubench")]
struct Model {
    inner: TrainedModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    #[pyo3(signature = (kind, x, y, mode="classification", hyperparams=None))]
    fn train(
        kind: &str,
        x: Vec<Vec<f64>>,
        y: Vec<f64>,
        mode: &str,
        hyperparams: Option<&Bound<'_, PyAny>>,
    ) -> PyResult<Model> {
        let kind = parse_model(kind).map_err(experiment_err)?;
        let mode = parse_task_mode(mode).map_err(experiment_err)?;
        let overrides = match hyperparams {
            Some(h) => serde_json::from_str(&json_dumps(h)?).map_err(value_err)?,
            None => serde_json::Map::new(),
        };
        let hp = Hyperparams::with_overrides(kind, &overrides).map_err(value_err)?;
        let x = matrix(x)?;
        let names: Vec<String> = (0..x.n_cols).map(|j| format!("x{j}")).collect();
        let inner = models::train(&hp, &x, &y, mode, &names, None).map_err(value_err)?;
        Ok(Model { inner })
    }

    /// Probabilities for classifiers, values for regressors.
    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.inner.predict(&matrix(x)?).map_err(value_err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind.name()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Model> {
        Ok(Model {
            inner: TrainedModel::from_json(text).map_err(value_err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Model(kind={}, features={})", self.inner.kind.name(), self.inner.n_features())
    }
}

fn check_lengths(a: &[f64], b: &[f64]) -> PyResult<()> {
    if a.len() != b.len() {
        return Err(value_err(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<f64>) -> PyResult<f64> {
    check_lengths(&scores, &labels)?;
    Ok(metrics::auroc(&scores, &labels))
}

#[pyfunction]
fn auprc(scores: Vec<f64>, labels: Vec<f64>) -> PyResult<f64> {
    check_lengths(&scores, &labels)?;
    Ok(metrics::auprc(&scores, &labels))
}

#[pyfunction]
#[pyo3(signature = (probs, labels, bins=CALIBRATION_BINS))]
fn calibration_error(probs: Vec<f64>, labels: Vec<f64>, bins: usize) -> PyResult<f64> {
    check_lengths(&probs, &labels)?;
    Ok(metrics::calibration_error(&probs, &labels, bins))
}

/// KDIGO stage at minute `t` from `(minute, value)` series.
#[pyfunction]
#[pyo3(signature = (t, creatinine, urine=Vec::new(), weight=None, rrt=Vec::new()))]
fn kdigo_stage(
    t: i64,
    creatinine: Vec<(i64, f64)>,
    urine: Vec<(i64, f64)>,
    weight: Option<f64>,
    rrt: Vec<i64>,
) -> PyResult<u8> {
    let inputs = KdigoInputs {
        creatinine,
        urine,
        weight,
        rrt,
    };
    stage_at(&inputs, t).map_err(value_err)
}

/// Minimizes `objective(point: dict) -> float` over a search space given as
/// `{name: {"dist": ..., ...}}`.
#[pyfunction]
#[pyo3(signature = (space, objective, n_init=10, n_calls=50, seed=0))]
fn bayes_optimize<'py>(
    py: Python<'py>,
    space: &Bound<'py, PyAny>,
    objective: &Bound<'py, PyAny>,
    n_init: usize,
    n_calls: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let space: SearchSpace = serde_json::from_str(&json_dumps(space)?).map_err(value_err)?;
    let cfg = BayesConfig {
        n_init,
        n_calls,
        seed,
        ..Default::default()
    };
    let mut failure: Option<PyErr> = None;
    let opt = tuner::bayes_optimize(&space, &cfg, &[0], |point, _| {
        if failure.is_some() {
            return f64::NAN;
        }
        let text = serde_json::to_string(point).expect("points serialize");
        let result = json_loads(py, &text)
            .and_then(|p| objective.call1((p,)))
            .and_then(|v| v.extract::<f64>());
        result.unwrap_or_else(|e| {
            failure = Some(e);
            f64::NAN
        })
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let opt = opt.map_err(value_err)?;
    json_loads(py, &serde_json::to_string(&opt).expect("optimum serializes"))
}

/// Cross-validates (and optionally tunes) the configured model.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config_from(config)?;
    run_to_py(py, run_train(&cfg).map_err(experiment_err)?)
}

/// Applies the models of a finished run to the configured dataset.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    config: &Bound<'py, PyAny>,
    source_dir: PathBuf,
    source_name: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config_from(config)?;
    run_to_py(py, run_evaluate(&cfg, &source_dir, source_name).map_err(experiment_err)?)
}

#[pymodule]
fn pyicubench(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Cohort>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(auprc, m)?)?;
    m.add_function(wrap_pyfunction!(calibration_error, m)?)?;
    m.add_function(wrap_pyfunction!(kdigo_stage, m)?)?;
    m.add_function(wrap_pyfunction!(bayes_optimize, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
