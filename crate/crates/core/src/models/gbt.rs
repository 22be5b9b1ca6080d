use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_training_data, class_weights, sigmoid, ClassWeight, EvalSet, Hyperparams, Link, Matrix, ModelBody,
    ModelError, ModelKind, TrainMeta, TrainedModel, MODEL_FORMAT_VERSION,
};
use crate::labelers::TaskMode;

pub const MAX_BINS: usize = 255;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbtParams {
    /// Maximum tree depth; zero or negative means unlimited.
    pub max_depth: i32,
    pub num_leaves: usize,
    /// Share of features drawn for each tree.
    pub colsample: f64,
    /// Share of rows drawn for each tree.
    pub subsample: f64,
    pub n_estimators: usize,
    pub min_child_samples: usize,
    pub learning_rate: f64,
    pub class_weight: ClassWeight,
    /// Rounds without improvement on the eval set before stopping.
    pub patience: usize,
    pub seed: u64,
    pub lambda_l2: f64,
    pub min_sum_hessian: f64,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            max_depth: -1,
            num_leaves: 31,
            colsample: 1.0,
            subsample: 1.0,
            n_estimators: 10_000,
            min_child_samples: 1000,
            learning_rate: 0.1,
            class_weight: ClassWeight::Balanced,
            patience: 10,
            seed: 0,
            lambda_l2: 0.0,
            min_sum_hessian: 1e-3,
        }
    }
}

impl GbtParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(ModelError::Param(format!("{name} must be in (0, 1], got {v}")))
            }
        };
        unit("colsample", self.colsample)?;
        unit("subsample", self.subsample)?;
        if self.num_leaves < 2 {
            return Err(ModelError::Param("num_leaves must be at least 2".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(ModelError::Param(format!("learning_rate must be non-negative, got {}", self.learning_rate)));
        }
        if !(self.lambda_l2 >= 0.0) || !(self.min_sum_hessian >= 0.0) {
            return Err(ModelError::Param("lambda_l2 and min_sum_hessian must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        gain: f64,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => i = if row[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

/// Per-feature bin upper bounds. A value falls in the first bin whose bound
/// is not below it; the last bin is open.
struct Binner {
    bounds: Vec<Vec<f64>>,
}

impl Binner {
    fn fit(x: &Matrix) -> Self {
        let bounds = (0..x.n_cols)
            .map(|j| {
                let mut v: Vec<f64> = (0..x.n_rows).map(|i| x.get(i, j)).collect();
                v.sort_by(f64::total_cmp);
                let mut distinct = v.clone();
                distinct.dedup();
                if distinct.len() <= MAX_BINS {
                    distinct.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
                } else {
                    let mut b: Vec<f64> = (1..MAX_BINS)
                        .map(|k| {
                            let pos = k * v.len() / MAX_BINS;
                            // Midpoint to the next distinct value keeps bins data-aligned.
                            let lo = v[pos - 1];
                            let hi = v[pos..].iter().copied().find(|&u| u > lo).unwrap_or(lo);
                            0.5 * (lo + hi)
                        })
                        .collect();
                    b.dedup();
                    if b.last() == v.last() {
                        b.pop();
                    }
                    b
                }
            })
            .collect();
        Binner { bounds }
    }

    /// Column-major bin indices.
    fn transform(&self, x: &Matrix) -> Vec<Vec<u8>> {
        self.bounds
            .iter()
            .enumerate()
            .map(|(j, b)| (0..x.n_rows).map(|i| b.partition_point(|&t| t < x.get(i, j)) as u8).collect())
            .collect()
    }

    fn n_bins(&self, j: usize) -> usize {
        self.bounds[j].len() + 1
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct BinStat {
    g: f64,
    h: f64,
    n: u32,
}

type Histogram = Vec<Vec<BinStat>>;

struct Candidate {
    gain: f64,
    feature: usize,
    bin: usize,
}

struct OpenLeaf {
    node: usize,
    rows: Vec<u32>,
    hist: Histogram,
    g: f64,
    h: f64,
    depth: i32,
    best: Option<Candidate>,
}

struct Grower<'a> {
    bins: &'a [Vec<u8>],
    binner: &'a Binner,
    features: Vec<usize>,
    grad: &'a [f64],
    hess: &'a [f64],
    p: &'a GbtParams,
}

impl Grower<'_> {
    fn histogram(&self, rows: &[u32]) -> Histogram {
        let mut hist: Histogram = (0..self.bins.len()).map(|_| Vec::new()).collect();
        for &j in &self.features {
            let mut hj = vec![BinStat::default(); self.binner.n_bins(j)];
            let col = &self.bins[j];
            for &r in rows {
                let s = &mut hj[col[r as usize] as usize];
                s.g += self.grad[r as usize];
                s.h += self.hess[r as usize];
                s.n += 1;
            }
            hist[j] = hj;
        }
        hist
    }

    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.p.lambda_l2)
    }

    fn leaf_value(&self, g: f64, h: f64) -> f64 {
        let d = h + self.p.lambda_l2;
        if d > 0.0 {
            -g / d
        } else {
            0.0
        }
    }

    fn best_split(&self, leaf: &OpenLeaf) -> Option<Candidate> {
        if self.p.max_depth > 0 && leaf.depth >= self.p.max_depth {
            return None;
        }
        let n = leaf.rows.len() as u32;
        let min_n = self.p.min_child_samples.max(1) as u32;
        let parent = self.score(leaf.g, leaf.h);
        let mut best: Option<Candidate> = None;
        for &j in &self.features {
            let (mut gl, mut hl, mut nl) = (0.0, 0.0, 0u32);
            let hj = &leaf.hist[j];
            for b in 0..hj.len().saturating_sub(1) {
                gl += hj[b].g;
                hl += hj[b].h;
                nl += hj[b].n;
                let (gr, hr, nr) = (leaf.g - gl, leaf.h - hl, n - nl);
                if nl < min_n || nr < min_n {
                    continue;
                }
                if hl < self.p.min_sum_hessian || hr < self.p.min_sum_hessian {
                    continue;
                }
                let gain = self.score(gl, hl) + self.score(gr, hr) - parent;
                if gain > 1e-12 && best.as_ref().map_or(true, |c| gain > c.gain) {
                    best = Some(Candidate { gain, feature: j, bin: b });
                }
            }
        }
        best
    }

    fn grow(&self, rows: Vec<u32>) -> Tree {
        let (g, h) = rows
            .iter()
            .fold((0.0, 0.0), |(g, h), &r| (g + self.grad[r as usize], h + self.hess[r as usize]));
        let mut nodes = vec![Node::Leaf {
            value: self.leaf_value(g, h),
        }];
        let hist = self.histogram(&rows);
        let mut root = OpenLeaf {
            node: 0,
            rows,
            hist,
            g,
            h,
            depth: 0,
            best: None,
        };
        root.best = self.best_split(&root);
        let mut open = vec![root];
        let mut n_leaves = 1;
        while n_leaves < self.p.num_leaves {
            // Highest gain first; the earliest leaf wins ties.
            let Some(pick) = open
                .iter()
                .enumerate()
                .filter_map(|(i, l)| l.best.as_ref().map(|c| (i, c.gain)))
                .fold(None::<(usize, f64)>, |acc, (i, g)| match acc {
                    Some((_, bg)) if bg >= g => acc,
                    _ => Some((i, g)),
                })
                .map(|(i, _)| i)
            else {
                break;
            };
            let leaf = open.swap_remove(pick);
            let c = leaf.best.as_ref().expect("picked leaves have a split");
            let col = &self.bins[c.feature];
            let (left_rows, right_rows): (Vec<u32>, Vec<u32>) =
                leaf.rows.iter().partition(|&&r| (col[r as usize] as usize) <= c.bin);
            let sum = |rs: &[u32]| {
                rs.iter()
                    .fold((0.0, 0.0), |(g, h), &r| (g + self.grad[r as usize], h + self.hess[r as usize]))
            };
            let (gl, hl) = sum(&left_rows);
            let (gr, hr) = (leaf.g - gl, leaf.h - hl);
            // Build the smaller child's histogram and derive the other by subtraction.
            let left_small = left_rows.len() <= right_rows.len();
            let small = self.histogram(if left_small { &left_rows } else { &right_rows });
            let large: Histogram = leaf
                .hist
                .iter()
                .zip(&small)
                .map(|(p, s)| {
                    p.iter()
                        .zip(s)
                        .map(|(a, b)| BinStat {
                            g: a.g - b.g,
                            h: a.h - b.h,
                            n: a.n - b.n,
                        })
                        .collect()
                })
                .collect();
            let (hist_l, hist_r) = if left_small { (small, large) } else { (large, small) };
            let l_idx = nodes.len();
            nodes.push(Node::Leaf {
                value: self.leaf_value(gl, hl),
            });
            nodes.push(Node::Leaf {
                value: self.leaf_value(gr, hr),
            });
            nodes[leaf.node] = Node::Split {
                feature: c.feature,
                threshold: self.binner.bounds[c.feature][c.bin],
                left: l_idx,
                right: l_idx + 1,
                gain: c.gain,
            };
            n_leaves += 1;
            for (node, rows, hist, g, h) in [(l_idx, left_rows, hist_l, gl, hl), (l_idx + 1, right_rows, hist_r, gr, hr)]
            {
                let mut child = OpenLeaf {
                    node,
                    rows,
                    hist,
                    g,
                    h,
                    depth: leaf.depth + 1,
                    best: None,
                };
                child.best = self.best_split(&child);
                open.push(child);
            }
            // Keep leaf order stable regardless of swap_remove.
            open.sort_by_key(|l| l.node);
        }
        Tree { nodes }
    }
}

fn loss(mode: TaskMode, eta: f64, y: f64) -> f64 {
    match mode {
        TaskMode::Classification => eta.max(0.0) + (-eta.abs()).exp().ln_1p() - y * eta,
        TaskMode::Regression => 0.5 * (eta - y) * (eta - y),
    }
}

/// Leaf-wise histogram gradient boosting with Newton leaf values.
pub fn train_gbt(
    x: &Matrix,
    y: &[f64],
    hp: &GbtParams,
    mode: TaskMode,
    eval: Option<EvalSet<'_>>,
) -> Result<TrainedModel, ModelError> {
    check_training_data(x, y, mode)?;
    hp.validate()?;
    if let Some(e) = &eval {
        check_training_data(e.x, e.y, mode)?;
        if e.x.n_cols != x.n_cols {
            return Err(ModelError::Features {
                expected: x.n_cols,
                got: e.x.n_cols,
            });
        }
    }
    let n = x.n_rows;
    let w = match mode {
        TaskMode::Classification => class_weights(y, hp.class_weight),
        TaskMode::Regression => vec![1.0; n],
    };
    let wsum: f64 = w.iter().sum();
    let base = match mode {
        TaskMode::Classification => {
            let p = (w.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / wsum).clamp(1e-12, 1.0 - 1e-12);
            (p / (1.0 - p)).ln()
        }
        TaskMode::Regression => y.iter().sum::<f64>() / n as f64,
    };
    let binner = Binner::fit(x);
    let bins = binner.transform(x);
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut eta = vec![base; n];
    let mut eval_eta = eval.as_ref().map(|e| vec![base; e.x.n_rows]);
    let eval_loss = |etas: &[f64], e: &EvalSet<'_>| {
        etas.iter().zip(e.y).map(|(&s, &t)| loss(mode, s, t)).sum::<f64>() / e.y.len() as f64
    };
    let mut best_loss = match (&eval, &eval_eta) {
        (Some(e), Some(ee)) => eval_loss(ee, e),
        _ => f64::INFINITY,
    };
    let mut best_rounds = 0;
    let mut trees = Vec::new();
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let n_feat = ((hp.colsample * x.n_cols as f64).round() as usize).clamp(1, x.n_cols.max(1));
    let n_rows = ((hp.subsample * n as f64).round() as usize).clamp(1, n);
    for round in 0..hp.n_estimators {
        for i in 0..n {
            match mode {
                TaskMode::Classification => {
                    let p = sigmoid(eta[i]);
                    grad[i] = w[i] * (p - y[i]);
                    hess[i] = w[i] * (p * (1.0 - p)).max(1e-16);
                }
                TaskMode::Regression => {
                    grad[i] = eta[i] - y[i];
                    hess[i] = 1.0;
                }
            }
        }
        let mut features: Vec<usize> = if n_feat < x.n_cols {
            sample(&mut rng, x.n_cols, n_feat).into_vec()
        } else {
            (0..x.n_cols).collect()
        };
        features.sort_unstable();
        let mut rows: Vec<u32> = if n_rows < n {
            sample(&mut rng, n, n_rows).into_iter().map(|r| r as u32).collect()
        } else {
            (0..n as u32).collect()
        };
        rows.sort_unstable();
        let grower = Grower {
            bins: &bins,
            binner: &binner,
            features,
            grad: &grad,
            hess: &hess,
            p: hp,
        };
        let tree = grower.grow(rows);
        for (i, e) in eta.iter_mut().enumerate() {
            *e += hp.learning_rate * tree.predict_row(x.row(i));
        }
        trees.push(tree);
        match (&eval, &mut eval_eta) {
            (Some(e), Some(ee)) => {
                let t = trees.last().expect("just pushed");
                for (i, s) in ee.iter_mut().enumerate() {
                    *s += hp.learning_rate * t.predict_row(e.x.row(i));
                }
                let l = eval_loss(ee, e);
                if l < best_loss {
                    best_loss = l;
                    best_rounds = round + 1;
                } else if round + 1 - best_rounds >= hp.patience.max(1) {
                    break;
                }
            }
            _ => best_rounds = round + 1,
        }
    }
    trees.truncate(best_rounds);
    Ok(TrainedModel {
        version: MODEL_FORMAT_VERSION,
        kind: ModelKind::Gbt,
        link: match mode {
            TaskMode::Classification => Link::Logistic,
            TaskMode::Regression => Link::Identity,
        },
        feature_names: Vec::new(),
        meta: TrainMeta {
            seed: hp.seed,
            iterations: trees.len(),
            converged: eval.is_some() && trees.len() < hp.n_estimators,
        },
        body: ModelBody::Trees {
            base,
            learning_rate: hp.learning_rate,
            trees,
        },
        hyperparams: Hyperparams::Gbt(hp.clone()),
    })
}
