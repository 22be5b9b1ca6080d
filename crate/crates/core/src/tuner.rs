//! Hyperparameter distributions, Gaussian-process Bayesian optimization and
//! repeated k-fold split plans.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TunerError {
    #[error("parameter `{name}`: {message}")]
    Distribution { name: String, message: String },
    #[error("need at least 3 folds, got {0}")]
    TooFewFolds(usize),
    #[error("need at least one repetition")]
    NoRepetitions,
    #[error("n_init ({n_init}) must be between 1 and n_calls ({n_calls})")]
    Budget { n_init: usize, n_calls: usize },
    #[error("every trial failed")]
    AllFailed,
}

/// Deterministic seed derived from a parent seed and a path of indices.
pub fn sub_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        // splitmix64 finalizer over the running state
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case", deny_unknown_fields)]
pub enum ParamDistribution {
    Uniform {
        low: f64,
        high: f64,
    },
    /// Reciprocal distribution; `integer` rounds the draw.
    LogUniform {
        low: f64,
        high: f64,
        #[serde(default)]
        integer: bool,
    },
    /// Integers in `[low, high]`, both ends included.
    Randint {
        low: i64,
        high: i64,
    },
    Choice {
        values: Vec<Value>,
    },
}

impl ParamDistribution {
    pub fn validate(&self, name: &str) -> Result<(), TunerError> {
        let err = |m: &str| {
            Err(TunerError::Distribution {
                name: name.to_string(),
                message: m.to_string(),
            })
        };
        match *self {
            ParamDistribution::Uniform { low, high } if !(low < high) => err("low must be below high"),
            ParamDistribution::LogUniform { low, high, .. } if !(low < high) => err("low must be below high"),
            ParamDistribution::LogUniform { low, .. } if !(low > 0.0) => err("log-uniform needs a positive lower bound"),
            ParamDistribution::Randint { low, high } if low >= high => err("low must be below high"),
            ParamDistribution::Choice { ref values } if values.is_empty() => err("choice needs at least one value"),
            _ => Ok(()),
        }
    }

    /// Density (or mass for discrete kinds) at `x`.
    pub fn pdf(&self, x: &Value) -> f64 {
        match self {
            ParamDistribution::Uniform { low, high } => match x.as_f64() {
                Some(v) if v >= *low && v <= *high => 1.0 / (high - low),
                _ => 0.0,
            },
            ParamDistribution::LogUniform { low, high, .. } => match x.as_f64() {
                Some(v) if v >= *low && v <= *high => 1.0 / (v * (high.ln() - low.ln())),
                _ => 0.0,
            },
            ParamDistribution::Randint { low, high } => match x.as_i64() {
                Some(v) if v >= *low && v <= *high => 1.0 / (high - low + 1) as f64,
                _ => 0.0,
            },
            ParamDistribution::Choice { values } => {
                values.iter().filter(|v| *v == x).count() as f64 / values.len() as f64
            }
        }
    }

    /// Inverse-CDF transform of `u` in `[0, 1)`.
    pub fn from_unit(&self, u: f64) -> Value {
        let u = u.clamp(0.0, 1.0);
        match self {
            ParamDistribution::Uniform { low, high } => Value::from((low + u * (high - low)).min(*high)),
            ParamDistribution::LogUniform { low, high, integer } => {
                let v = (low.ln() + u * (high.ln() - low.ln())).exp().clamp(*low, *high);
                if *integer {
                    Value::from(v.round().clamp(low.ceil(), high.floor()) as i64)
                } else {
                    Value::from(v)
                }
            }
            ParamDistribution::Randint { low, high } => {
                let span = (high - low + 1) as f64;
                Value::from((low + (u * span).floor() as i64).min(*high))
            }
            ParamDistribution::Choice { values } => {
                values[((u * values.len() as f64).floor() as usize).min(values.len() - 1)].clone()
            }
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Value {
        self.from_unit(rng.gen())
    }

    pub fn contains(&self, x: &Value) -> bool {
        self.pdf(x) > 0.0
    }

    /// Coordinates in the unit cube used by the surrogate model.
    fn encode(&self, x: &Value, out: &mut Vec<f64>) {
        match self {
            ParamDistribution::Uniform { low, high } => out.push((x.as_f64().unwrap_or(*low) - low) / (high - low)),
            ParamDistribution::LogUniform { low, high, .. } => {
                let v = x.as_f64().unwrap_or(*low).max(*low);
                out.push((v.ln() - low.ln()) / (high.ln() - low.ln()))
            }
            ParamDistribution::Randint { low, high } => {
                out.push((x.as_i64().unwrap_or(*low) - low) as f64 / (high - low) as f64)
            }
            ParamDistribution::Choice { values } => out.extend(values.iter().map(|v| (v == x) as u8 as f64)),
        }
    }
}

pub type SearchSpace = BTreeMap<String, ParamDistribution>;
pub type Point = serde_json::Map<String, Value>;

pub fn validate_space(space: &SearchSpace) -> Result<(), TunerError> {
    space.iter().try_for_each(|(k, d)| d.validate(k))
}

fn encode_point(space: &SearchSpace, p: &Point) -> Vec<f64> {
    let mut out = Vec::new();
    for (k, d) in space {
        d.encode(p.get(k).unwrap_or(&Value::Null), &mut out);
    }
    out
}

fn point_from_unit(space: &SearchSpace, u: &[f64]) -> Point {
    space.iter().zip(u).map(|((k, d), &x)| (k.clone(), d.from_unit(x))).collect()
}

fn random_point(space: &SearchSpace, rng: &mut ChaCha8Rng) -> Point {
    space.iter().map(|(k, d)| (k.clone(), d.sample(rng))).collect()
}

const PRIMES: [u32; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let (mut f, mut r) = (1.0, 0.0);
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Randomly shifted Halton points in `[0, 1)^d`.
pub fn halton(n: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let shift: Vec<f64> = (0..d).map(|_| rng.gen()).collect();
    (1..=n as u64)
        .map(|i| {
            (0..d)
                .map(|j| {
                    let base = PRIMES[j % PRIMES.len()] as u64;
                    (radical_inverse(i, base) + shift[j]).fract()
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub point: Point,
    /// `None` when the objective failed or returned a non-finite value.
    pub value: Option<f64>,
    pub folds: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimum {
    pub best: Point,
    pub best_value: f64,
    pub trials: Vec<TrialRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BayesConfig {
    pub n_init: usize,
    pub n_calls: usize,
    pub xi: f64,
    pub candidates: usize,
    pub seed: u64,
}

impl Default for BayesConfig {
    fn default() -> Self {
        BayesConfig {
            n_init: 10,
            n_calls: 50,
            xi: 0.01,
            candidates: 1024,
            seed: 0,
        }
    }
}

const LENGTH_SCALES: [f64; 8] = [0.05, 0.1, 0.2, 0.3, 0.5, 0.8, 1.2, 2.0];
const NOISES: [f64; 4] = [0.0, 1e-4, 1e-2, 1e-1];
const JITTER: f64 = 1e-6;

/// Zero-mean GP with a squared-exponential kernel on standardized targets.
struct Gp {
    xs: Vec<Vec<f64>>,
    length: f64,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    alpha: DVector<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Gp {
    fn fit(xs: &[Vec<f64>], ys: &[f64]) -> Option<Gp> {
        let n = xs.len();
        let y = DVector::from_column_slice(ys);
        let mut best: Option<(f64, Gp)> = None;
        for &length in &LENGTH_SCALES {
            for &noise in &NOISES {
                let k = DMatrix::from_fn(n, n, |i, j| {
                    let v = (-0.5 * sq_dist(&xs[i], &xs[j]) / (length * length)).exp();
                    if i == j {
                        v + noise + JITTER
                    } else {
                        v
                    }
                });
                let Some(chol) = k.cholesky() else { continue };
                let alpha = chol.solve(&y);
                let log_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
                let lml = -0.5 * y.dot(&alpha) - 0.5 * log_det;
                if best.as_ref().map_or(true, |(b, _)| lml > *b) {
                    best = Some((
                        lml,
                        Gp {
                            xs: xs.to_vec(),
                            length,
                            chol,
                            alpha,
                        },
                    ));
                }
            }
        }
        best.map(|(_, g)| g)
    }

    fn predict(&self, x: &[f64]) -> (f64, f64) {
        let k = DVector::from_iterator(
            self.xs.len(),
            self.xs.iter().map(|xi| (-0.5 * sq_dist(xi, x) / (self.length * self.length)).exp()),
        );
        let mean = k.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&k).expect("cholesky factor is invertible");
        let var = (1.0 + JITTER - v.dot(&v)).max(1e-12);
        (mean, var.sqrt())
    }
}

/// Expected improvement for minimization.
fn expected_improvement(mean: f64, sd: f64, best: f64, xi: f64) -> f64 {
    let n = Normal::standard();
    let imp = best - mean - xi;
    let z = imp / sd;
    imp * n.cdf(z) + sd * n.pdf(z)
}

/// Minimizes `objective` over `space`. The objective receives the point and
/// a per-trial seed; non-finite results count as failures and are replaced
/// by a penalty when fitting the surrogate.
pub fn bayes_optimize(
    space: &SearchSpace,
    cfg: &BayesConfig,
    folds: &[usize],
    mut objective: impl FnMut(&Point, u64) -> f64,
) -> Result<Optimum, TunerError> {
    validate_space(space)?;
    if cfg.n_init == 0 || cfg.n_init > cfg.n_calls {
        return Err(TunerError::Budget {
            n_init: cfg.n_init,
            n_calls: cfg.n_calls,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = halton(cfg.n_init, space.len(), &mut rng);
    let mut trials: Vec<TrialRecord> = Vec::with_capacity(cfg.n_calls);
    let mut run = |point: Point, trials: &mut Vec<TrialRecord>| {
        let index = trials.len();
        let seed = sub_seed(&[cfg.seed, index as u64]);
        let v = objective(&point, seed);
        trials.push(TrialRecord {
            index,
            point,
            value: v.is_finite().then_some(v),
            folds: folds.to_vec(),
            seed,
        });
    };
    for u in &init {
        run(point_from_unit(space, u), &mut trials);
    }
    while trials.len() < cfg.n_calls {
        let finite: Vec<f64> = trials.iter().filter_map(|t| t.value).collect();
        let next = if finite.is_empty() {
            random_point(space, &mut rng)
        } else {
            let worst = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
            let penalty = worst + (worst - lo).max(1.0);
            let raw: Vec<f64> = trials.iter().map(|t| t.value.unwrap_or(penalty)).collect();
            let mean = raw.iter().sum::<f64>() / raw.len() as f64;
            let sd = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / raw.len() as f64).sqrt();
            let sd = if sd > 0.0 { sd } else { 1.0 };
            let ys: Vec<f64> = raw.iter().map(|v| (v - mean) / sd).collect();
            let xs: Vec<Vec<f64>> = trials.iter().map(|t| encode_point(space, &t.point)).collect();
            let best_y = ys.iter().cloned().fold(f64::INFINITY, f64::min);
            let candidates: Vec<Point> = (0..cfg.candidates.max(1)).map(|_| random_point(space, &mut rng)).collect();
            match Gp::fit(&xs, &ys) {
                Some(gp) => {
                    let mut pick = 0;
                    let mut pick_ei = f64::NEG_INFINITY;
                    for (i, c) in candidates.iter().enumerate() {
                        let (m, s) = gp.predict(&encode_point(space, c));
                        let ei = expected_improvement(m, s, best_y, cfg.xi);
                        if ei > pick_ei {
                            pick_ei = ei;
                            pick = i;
                        }
                    }
                    candidates.into_iter().nth(pick).expect("pick indexes the pool")
                }
                None => candidates.into_iter().next().expect("pool is non-empty"),
            }
        };
        run(next, &mut trials);
    }
    let best = trials
        .iter()
        .filter_map(|t| t.value.map(|v| (t, v)))
        .fold(None::<(&TrialRecord, f64)>, |acc, (t, v)| match acc {
            Some((_, bv)) if bv <= v => acc,
            _ => Some((t, v)),
        })
        .ok_or(TunerError::AllFailed)?;
    Ok(Optimum {
        best: best.0.point.clone(),
        best_value: best.1,
        trials,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub repetition: usize,
    pub fold: usize,
    pub train: Vec<i64>,
    pub val: Vec<i64>,
    pub test: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub folds: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub splits: Vec<Split>,
}

impl SplitPlan {
    pub fn get(&self, repetition: usize, fold: usize) -> &Split {
        &self.splits[repetition * self.folds + fold]
    }
}

/// Repeated k-fold plan over unique stay ids. Within each repetition fold `k`
/// is the test set, fold `(k + 1) mod K` the validation set and the rest is
/// used for training.
pub fn make_splits(stay_ids: &[i64], folds: usize, repetitions: usize, seed: u64) -> Result<SplitPlan, TunerError> {
    if folds < 3 {
        return Err(TunerError::TooFewFolds(folds));
    }
    if repetitions == 0 {
        return Err(TunerError::NoRepetitions);
    }
    let mut ids = stay_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let n = ids.len();
    let mut splits = Vec::with_capacity(folds * repetitions);
    for r in 0..repetitions {
        let mut order = ids.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(&[seed, r as u64])));
        let chunk = |k: usize| {
            let mut v = order[k * n / folds..(k + 1) * n / folds].to_vec();
            v.sort_unstable();
            v
        };
        for k in 0..folds {
            let v = (k + 1) % folds;
            let mut train: Vec<i64> = (0..folds).filter(|&f| f != k && f != v).flat_map(chunk).collect();
            train.sort_unstable();
            splits.push(Split {
                repetition: r,
                fold: k,
                train,
                val: chunk(v),
                test: chunk(k),
            });
        }
    }
    Ok(SplitPlan {
        folds,
        repetitions,
        seed,
        splits,
    })
}
