use serde::{Deserialize, Serialize};

use super::{
    check_training_data, class_weights, sigmoid, ClassWeight, Hyperparams, Link, Matrix, ModelBody, ModelError,
    ModelKind, TrainMeta, TrainedModel, MODEL_FORMAT_VERSION,
};
use crate::labelers::TaskMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    L1,
    #[default]
    L2,
    ElasticNet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogRegParams {
    /// Inverse regularization strength.
    pub c: f64,
    pub penalty: Penalty,
    /// Share of L1 in the elastic-net penalty; ignored for pure L1/L2.
    pub l1_ratio: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub class_weight: ClassWeight,
}

impl Default for LogRegParams {
    fn default() -> Self {
        LogRegParams {
            c: 1.0,
            penalty: Penalty::L2,
            l1_ratio: 0.5,
            max_iter: 100_000,
            tol: 1e-8,
            class_weight: ClassWeight::Balanced,
        }
    }
}

impl LogRegParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.c > 0.0) || !self.c.is_finite() {
            return Err(ModelError::Param(format!("C must be positive, got {}", self.c)));
        }
        if !(0.0..=1.0).contains(&self.l1_ratio) {
            return Err(ModelError::Param(format!("l1_ratio must be in [0, 1], got {}", self.l1_ratio)));
        }
        if !(self.tol >= 0.0) {
            return Err(ModelError::Param("tol must be non-negative".into()));
        }
        Ok(())
    }

    fn effective_l1_ratio(&self) -> f64 {
        match self.penalty {
            Penalty::L1 => 1.0,
            Penalty::L2 => 0.0,
            Penalty::ElasticNet => self.l1_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElasticNetParams {
    pub alpha: f64,
    pub l1_ratio: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ElasticNetParams {
    fn default() -> Self {
        ElasticNetParams {
            alpha: 1.0,
            l1_ratio: 0.5,
            tol: 1e-4,
            max_iter: 10_000,
        }
    }
}

impl ElasticNetParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(ModelError::Param(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.l1_ratio) {
            return Err(ModelError::Param(format!("l1_ratio must be in [0, 1], got {}", self.l1_ratio)));
        }
        Ok(())
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Weighted logistic loss `log(1 + e^eta) - y * eta`, computed stably.
fn logistic_loss(eta: f64, y: f64) -> f64 {
    eta.max(0.0) + (-eta.abs()).exp().ln_1p() - y * eta
}

struct LogRegProblem<'a> {
    x: &'a Matrix,
    y: &'a [f64],
    w: Vec<f64>,
    /// `lambda * l1_ratio` and `lambda * (1 - l1_ratio)`.
    l1: f64,
    l2: f64,
}

impl LogRegProblem<'_> {
    fn n(&self) -> f64 {
        self.x.n_rows as f64
    }

    fn etas(&self, beta: &[f64], b: f64) -> Vec<f64> {
        (0..self.x.n_rows)
            .map(|i| b + self.x.row(i).iter().zip(beta).map(|(x, w)| x * w).sum::<f64>())
            .collect()
    }

    /// Smooth part of the objective.
    fn smooth(&self, beta: &[f64], b: f64) -> f64 {
        let etas = self.etas(beta, b);
        let loss: f64 = etas
            .iter()
            .zip(self.y)
            .zip(&self.w)
            .map(|((&e, &y), &w)| w * logistic_loss(e, y))
            .sum();
        loss / self.n() + 0.5 * self.l2 * beta.iter().map(|v| v * v).sum::<f64>()
    }

    fn smooth_grad(&self, beta: &[f64], b: f64) -> (f64, Vec<f64>, f64) {
        let etas = self.etas(beta, b);
        let n = self.n();
        let mut g = vec![0.0; beta.len()];
        let mut gb = 0.0;
        let mut loss = 0.0;
        for (i, &e) in etas.iter().enumerate() {
            let r = self.w[i] * (sigmoid(e) - self.y[i]) / n;
            loss += self.w[i] * logistic_loss(e, self.y[i]);
            gb += r;
            for (gj, xj) in g.iter_mut().zip(self.x.row(i)) {
                *gj += r * xj;
            }
        }
        for (gj, bj) in g.iter_mut().zip(beta) {
            *gj += self.l2 * bj;
        }
        let f = loss / n + 0.5 * self.l2 * beta.iter().map(|v| v * v).sum::<f64>();
        (f, g, gb)
    }

    fn objective(&self, beta: &[f64], b: f64) -> f64 {
        self.smooth(beta, b) + self.l1 * beta.iter().map(|v| v.abs()).sum::<f64>()
    }

    /// Power-iteration estimate of the gradient's Lipschitz constant.
    fn lipschitz(&self) -> f64 {
        let p = self.x.n_cols;
        let mut v = vec![1.0 / ((p + 1) as f64).sqrt(); p + 1];
        let mut est = 0.0;
        for _ in 0..30 {
            let xv: Vec<f64> = (0..self.x.n_rows)
                .map(|i| v[p] + self.x.row(i).iter().zip(&v).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let mut u = vec![0.0; p + 1];
            for (i, &s) in xv.iter().enumerate() {
                let s = s * self.w[i];
                u[p] += s;
                for (uj, xj) in u.iter_mut().zip(self.x.row(i)) {
                    *uj += s * xj;
                }
            }
            let norm = u.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            est = norm;
            v = u.into_iter().map(|a| a / norm).collect();
        }
        est / (4.0 * self.n()) + self.l2
    }
}

/// Objective minimized by [`train_logreg`]: mean class-weighted cross-entropy
/// plus `lambda * (r * |beta|_1 + (1 - r) / 2 * |beta|^2)` with
/// `lambda = 1 / (C * N)`.
pub fn logreg_objective(x: &Matrix, y: &[f64], hp: &LogRegParams, coef: &[f64], intercept: f64) -> f64 {
    let lambda = 1.0 / (hp.c * x.n_rows as f64);
    let r = hp.effective_l1_ratio();
    LogRegProblem {
        x,
        y,
        w: class_weights(y, hp.class_weight),
        l1: lambda * r,
        l2: lambda * (1.0 - r),
    }
    .objective(coef, intercept)
}

/// Monotone accelerated proximal gradient with backtracking.
pub fn train_logreg(x: &Matrix, y: &[f64], hp: &LogRegParams) -> Result<TrainedModel, ModelError> {
    check_training_data(x, y, TaskMode::Classification)?;
    hp.validate()?;
    let lambda = 1.0 / (hp.c * x.n_rows as f64);
    let r = hp.effective_l1_ratio();
    let prob = LogRegProblem {
        x,
        y,
        w: class_weights(y, hp.class_weight),
        l1: lambda * r,
        l2: lambda * (1.0 - r),
    };
    let p = x.n_cols;
    let mut beta = vec![0.0; p];
    let mut b = 0.0;
    let mut f_best = prob.objective(&beta, b);
    let (mut yb, mut yb0) = (beta.clone(), b);
    let mut t: f64 = 1.0;
    let mut lip = prob.lipschitz().max(1e-12);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < hp.max_iter {
        iterations += 1;
        let (f_y, g, gb) = prob.smooth_grad(&yb, yb0);
        let (z, z0, f_z) = loop {
            let step = 1.0 / lip;
            let z: Vec<f64> = yb
                .iter()
                .zip(&g)
                .map(|(v, gj)| soft_threshold(v - step * gj, step * prob.l1))
                .collect();
            let z0 = yb0 - step * gb;
            let f_z = prob.smooth(&z, z0);
            let dz: Vec<f64> = z.iter().zip(&yb).map(|(a, b)| a - b).collect();
            let lin = g.iter().zip(&dz).map(|(a, b)| a * b).sum::<f64>() + gb * (z0 - yb0);
            let quad = dz.iter().map(|d| d * d).sum::<f64>() + (z0 - yb0).powi(2);
            if f_z <= f_y + lin + 0.5 * lip * quad + 1e-12 * f_y.abs() || lip > 1e15 {
                break (z, z0, f_z);
            }
            lip *= 2.0;
        };
        let obj_z = f_z + prob.l1 * z.iter().map(|v| v.abs()).sum::<f64>();
        let t_next: f64 = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        if obj_z <= f_best {
            let decrease = f_best - obj_z;
            let prev = std::mem::replace(&mut beta, z);
            let prev0 = std::mem::replace(&mut b, z0);
            f_best = obj_z;
            let m = (t - 1.0) / t_next;
            yb = beta.iter().zip(&prev).map(|(c, o)| c + m * (c - o)).collect();
            yb0 = b + m * (b - prev0);
            t = t_next;
            if decrease <= hp.tol * f_best.abs().max(1.0) {
                converged = true;
                break;
            }
        } else {
            // Momentum overshot: restart from the best iterate.
            yb = beta.clone();
            yb0 = b;
            t = 1.0;
        }
    }
    Ok(TrainedModel {
        version: MODEL_FORMAT_VERSION,
        kind: ModelKind::LogisticRegression,
        link: Link::Logistic,
        feature_names: Vec::new(),
        body: ModelBody::Linear {
            coef: beta,
            intercept: b,
        },
        meta: TrainMeta {
            seed: 0,
            iterations,
            converged,
        },
        hyperparams: Hyperparams::LogisticRegression(hp.clone()),
    })
}

/// `0.5 * |y - X beta - b|^2 / N + alpha * (r |beta|_1 + (1 - r) / 2 |beta|^2)`.
pub fn elasticnet_objective(x: &Matrix, y: &[f64], hp: &ElasticNetParams, coef: &[f64], intercept: f64) -> f64 {
    let n = x.n_rows as f64;
    let rss: f64 = (0..x.n_rows)
        .map(|i| {
            let pred = intercept + x.row(i).iter().zip(coef).map(|(a, b)| a * b).sum::<f64>();
            (y[i] - pred).powi(2)
        })
        .sum();
    let l1: f64 = coef.iter().map(|v| v.abs()).sum();
    let l2: f64 = coef.iter().map(|v| v * v).sum();
    0.5 * rss / n + hp.alpha * (hp.l1_ratio * l1 + 0.5 * (1.0 - hp.l1_ratio) * l2)
}

/// Cyclic coordinate descent with an unpenalized intercept.
pub fn train_elasticnet(x: &Matrix, y: &[f64], hp: &ElasticNetParams) -> Result<TrainedModel, ModelError> {
    check_training_data(x, y, TaskMode::Regression)?;
    hp.validate()?;
    let (n, p) = (x.n_rows, x.n_cols);
    let nf = n as f64;
    let x_mean: Vec<f64> = (0..p).map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / nf).collect();
    let y_mean = y.iter().sum::<f64>() / nf;
    let cols: Vec<Vec<f64>> = (0..p).map(|j| (0..n).map(|i| x.get(i, j) - x_mean[j]).collect()).collect();
    let sq: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>() / nf).collect();
    let mut resid: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    let y_scale = (resid.iter().map(|v| v * v).sum::<f64>() / nf).sqrt().max(1e-12);
    let l1 = hp.alpha * hp.l1_ratio;
    let l2 = hp.alpha * (1.0 - hp.l1_ratio);
    let mut beta = vec![0.0; p];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < hp.max_iter {
        iterations += 1;
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            let denom = sq[j] + l2;
            if denom <= 0.0 {
                continue;
            }
            let rho = cols[j].iter().zip(&resid).map(|(a, b)| a * b).sum::<f64>() / nf + sq[j] * beta[j];
            let new = soft_threshold(rho, l1) / denom;
            let delta = new - beta[j];
            if delta != 0.0 {
                for (r, c) in resid.iter_mut().zip(&cols[j]) {
                    *r -= delta * c;
                }
                beta[j] = new;
                max_change = max_change.max(delta.abs() * sq[j].sqrt());
            }
        }
        if max_change <= hp.tol * y_scale {
            converged = true;
            break;
        }
    }
    let intercept = y_mean - x_mean.iter().zip(&beta).map(|(m, b)| m * b).sum::<f64>();
    Ok(TrainedModel {
        version: MODEL_FORMAT_VERSION,
        kind: ModelKind::ElasticNet,
        link: Link::Identity,
        feature_names: Vec::new(),
        body: ModelBody::Linear { coef: beta, intercept },
        meta: TrainMeta {
            seed: 0,
            iterations,
            converged,
        },
        hyperparams: Hyperparams::ElasticNet(hp.clone()),
    })
}
