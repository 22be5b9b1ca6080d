//! Classical baselines: elastic-net logistic regression, elastic-net linear
//! regression and histogram gradient-boosted trees.

mod gbt;
mod linear;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labelers::TaskMode;

pub use gbt::{train_gbt, GbtParams, Node, Tree};
pub use linear::{
    elasticnet_objective, logreg_objective, train_elasticnet, train_logreg, ElasticNetParams, LogRegParams, Penalty,
};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("feature matrix contains a non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("{0} rows in X but {1} targets")]
    Shape(usize, usize),
    #[error("cannot train on an empty data set")]
    Empty,
    #[error("classification targets must be 0 or 1, got {0}")]
    NonBinary(f64),
    #[error("model {model} does not support {mode:?} tasks")]
    Mode { model: ModelKind, mode: TaskMode },
    #[error("invalid hyperparameter: {0}")]
    Param(String),
    #[error("model expects {expected} features, got {got}")]
    Features { expected: usize, got: usize },
    #[error("unsupported model file version {0}")]
    Version(u32),
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Matrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(n_rows: usize, n_cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n_rows * n_cols, "matrix data has the wrong length");
        Matrix { n_rows, n_cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * n_cols);
        for r in rows {
            assert_eq!(r.len(), n_cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), n_cols, data)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n_cols + j]
    }

    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.n_cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix::new(rows.len(), self.n_cols, data)
    }

    pub fn check_finite(&self) -> Result<(), ModelError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(p) => Err(ModelError::NonFinite {
                row: p / self.n_cols.max(1),
                col: p % self.n_cols.max(1),
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "LR")]
    LogisticRegression,
    #[serde(rename = "EN")]
    ElasticNet,
    #[serde(rename = "GBT")]
    Gbt,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::LogisticRegression, ModelKind::ElasticNet, ModelKind::Gbt];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::LogisticRegression => "LR",
            ModelKind::ElasticNet => "EN",
            ModelKind::Gbt => "GBT",
        }
    }

    pub fn supports(self, mode: TaskMode) -> bool {
        match self {
            ModelKind::LogisticRegression => mode == TaskMode::Classification,
            ModelKind::ElasticNet => mode == TaskMode::Regression,
            ModelKind::Gbt => true,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "lr" | "logreg" | "logisticregression" => ModelKind::LogisticRegression,
            "en" | "elasticnet" => ModelKind::ElasticNet,
            "gbt" | "lgbm" | "lgbmclassifier" | "lgbmregressor" => ModelKind::Gbt,
            _ => {
                let known: Vec<&str> = ModelKind::ALL.iter().map(|k| k.name()).collect();
                return Err(format!("unknown model `{s}`; available: {}", known.join(", ")));
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassWeight {
    None,
    #[default]
    Balanced,
}

/// Per-sample weights: `N / (2 N_c)` for class `c` when balanced.
pub fn class_weights(y: &[f64], mode: ClassWeight) -> Vec<f64> {
    match mode {
        ClassWeight::None => vec![1.0; y.len()],
        ClassWeight::Balanced => {
            let n = y.len() as f64;
            let pos = y.iter().filter(|&&v| v > 0.5).count() as f64;
            let neg = n - pos;
            let w_pos = if pos > 0.0 { n / (2.0 * pos) } else { 1.0 };
            let w_neg = if neg > 0.0 { n / (2.0 * neg) } else { 1.0 };
            y.iter().map(|&v| if v > 0.5 { w_pos } else { w_neg }).collect()
        }
    }
}

pub(crate) fn check_training_data(x: &Matrix, y: &[f64], mode: TaskMode) -> Result<(), ModelError> {
    if x.n_rows != y.len() {
        return Err(ModelError::Shape(x.n_rows, y.len()));
    }
    if x.n_rows == 0 {
        return Err(ModelError::Empty);
    }
    x.check_finite()?;
    if let Some(&bad) = y.iter().find(|v| !v.is_finite()) {
        return Err(ModelError::Param(format!("non-finite target {bad}")));
    }
    if mode == TaskMode::Classification {
        if let Some(&bad) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(ModelError::NonBinary(bad));
        }
    }
    Ok(())
}

/// Hyperparameters of any supported model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Hyperparams {
    #[serde(rename = "LR")]
    LogisticRegression(LogRegParams),
    #[serde(rename = "EN")]
    ElasticNet(ElasticNetParams),
    #[serde(rename = "GBT")]
    Gbt(GbtParams),
}

impl Hyperparams {
    pub fn defaults(kind: ModelKind) -> Self {
        match kind {
            ModelKind::LogisticRegression => Hyperparams::LogisticRegression(LogRegParams::default()),
            ModelKind::ElasticNet => Hyperparams::ElasticNet(ElasticNetParams::default()),
            ModelKind::Gbt => Hyperparams::Gbt(GbtParams::default()),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Hyperparams::LogisticRegression(_) => ModelKind::LogisticRegression,
            Hyperparams::ElasticNet(_) => ModelKind::ElasticNet,
            Hyperparams::Gbt(_) => ModelKind::Gbt,
        }
    }

    /// Overrides named fields of the defaults, rejecting unknown names.
    pub fn with_overrides(
        kind: ModelKind,
        overrides: &serde_json::Map<String, serde_json::Value>,
    ) -> Result<Self, ModelError> {
        let mut value = serde_json::to_value(Hyperparams::defaults(kind)).expect("hyperparameters serialize");
        let obj = value.as_object_mut().expect("hyperparameters are an object");
        for (k, v) in overrides {
            if k == "kind" || !obj.contains_key(k) {
                return Err(ModelError::Param(format!("{kind} has no hyperparameter `{k}`")));
            }
            obj.insert(k.clone(), v.clone());
        }
        let hp: Hyperparams = serde_json::from_value(value).map_err(|e| ModelError::Param(e.to_string()))?;
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            Hyperparams::LogisticRegression(p) => p.validate(),
            Hyperparams::ElasticNet(p) => p.validate(),
            Hyperparams::Gbt(p) => p.validate(),
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        if let Hyperparams::Gbt(p) = self {
            p.seed = seed;
        }
    }
}

/// Validation data used for early stopping.
pub struct EvalSet<'a> {
    pub x: &'a Matrix,
    pub y: &'a [f64],
}

/// Trains the model described by `hp`.
pub fn train(
    hp: &Hyperparams,
    x: &Matrix,
    y: &[f64],
    mode: TaskMode,
    feature_names: &[String],
    eval: Option<EvalSet<'_>>,
) -> Result<TrainedModel, ModelError> {
    let kind = hp.kind();
    if !kind.supports(mode) {
        return Err(ModelError::Mode { model: kind, mode });
    }
    hp.validate()?;
    let mut model = match hp {
        Hyperparams::LogisticRegression(p) => train_logreg(x, y, p)?,
        Hyperparams::ElasticNet(p) => train_elasticnet(x, y, p)?,
        Hyperparams::Gbt(p) => train_gbt(x, y, p, mode, eval)?,
    };
    model.feature_names = feature_names.to_vec();
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Logistic,
}

impl Link {
    pub fn apply(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Logistic => sigmoid(eta),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelBody {
    Linear { coef: Vec<f64>, intercept: f64 },
    Trees { base: f64, learning_rate: f64, trees: Vec<Tree> },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    /// Optimizer iterations or boosting rounds kept.
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub version: u32,
    pub kind: ModelKind,
    pub link: Link,
    pub feature_names: Vec<String>,
    pub body: ModelBody,
    pub meta: TrainMeta,
    pub hyperparams: Hyperparams,
}

impl TrainedModel {
    pub fn n_features(&self) -> usize {
        match &self.body {
            ModelBody::Linear { coef, .. } => coef.len(),
            ModelBody::Trees { .. } => self.feature_names.len().max(self.max_tree_feature()),
        }
    }

    fn max_tree_feature(&self) -> usize {
        match &self.body {
            ModelBody::Trees { trees, .. } => trees
                .iter()
                .flat_map(|t| t.nodes.iter())
                .filter_map(|n| match n {
                    Node::Split { feature, .. } => Some(feature + 1),
                    Node::Leaf { .. } => None,
                })
                .max()
                .unwrap_or(0),
            ModelBody::Linear { .. } => 0,
        }
    }

    /// Raw score before the link function.
    pub fn decision_row(&self, row: &[f64]) -> f64 {
        match &self.body {
            ModelBody::Linear { coef, intercept } => intercept + coef.iter().zip(row).map(|(b, x)| b * x).sum::<f64>(),
            ModelBody::Trees {
                base,
                learning_rate,
                trees,
            } => base + trees.iter().map(|t| learning_rate * t.predict_row(row)).sum::<f64>(),
        }
    }

    /// Probabilities for classifiers, values for regressors.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>, ModelError> {
        if x.n_rows > 0 && x.n_cols != self.n_features() {
            return Err(ModelError::Features {
                expected: self.n_features(),
                got: x.n_cols,
            });
        }
        Ok((0..x.n_rows).map(|i| self.link.apply(self.decision_row(x.row(i)))).collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let m: TrainedModel = serde_json::from_str(text).map_err(|e| ModelError::Param(e.to_string()))?;
        if m.version != MODEL_FORMAT_VERSION {
            return Err(ModelError::Version(m.version));
        }
        Ok(m)
    }
}
