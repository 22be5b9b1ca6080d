//! Evaluation metrics and fold aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Indices ordering `scores` descending; ties keep input order.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Cumulative (false positives, true positives) at each distinct threshold,
/// highest score first.
fn threshold_counts(scores: &[f64], labels: &[f64]) -> Vec<(f64, u64, u64)> {
    let idx = descending(scores);
    let mut out: Vec<(f64, u64, u64)> = Vec::new();
    let (mut fp, mut tp) = (0u64, 0u64);
    for (k, &i) in idx.iter().enumerate() {
        if labels[i] > 0.5 {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = k + 1 == idx.len() || scores[idx[k + 1]] != scores[i];
        if last_of_group {
            out.push((scores[i], fp, tp));
        }
    }
    out
}

fn class_counts(labels: &[f64]) -> (u64, u64) {
    let pos = labels.iter().filter(|&&l| l > 0.5).count() as u64;
    (pos, labels.len() as u64 - pos)
}

/// Area under the ROC curve as the Mann–Whitney statistic with ties counted
/// half. NaN when either class is absent.
pub fn auroc(scores: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(scores.len(), labels.len());
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 {
        return f64::NAN;
    }
    // Walk groups of tied scores from high to low; each positive beats the
    // negatives strictly below it and ties with those in its own group.
    let mut twice_concordant: u128 = 0;
    let (mut fp_prev, mut tp_prev) = (0u64, 0u64);
    for (_, fp, tp) in threshold_counts(scores, labels) {
        let (dfp, dtp) = (fp - fp_prev, tp - tp_prev);
        let below = n - fp;
        twice_concordant += 2 * dtp as u128 * below as u128 + dtp as u128 * dfp as u128;
        fp_prev = fp;
        tp_prev = tp;
    }
    twice_concordant as f64 / (2 * p as u128 * n as u128) as f64
}

/// Average precision over descending distinct thresholds.
pub fn auprc(scores: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(scores.len(), labels.len());
    let (p, _) = class_counts(labels);
    if p == 0 {
        return f64::NAN;
    }
    let mut ap = 0.0;
    let mut tp_prev = 0u64;
    for (_, fp, tp) in threshold_counts(scores, labels) {
        if tp > tp_prev {
            ap += (tp - tp_prev) as f64 / p as f64 * (tp as f64 / (tp + fp) as f64);
        }
        tp_prev = tp;
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub y: f64,
}

/// (false positive rate, true positive rate) from (0, 0) to (1, 1).
pub fn roc_curve(scores: &[f64], labels: &[f64]) -> Vec<CurvePoint> {
    let (p, n) = class_counts(labels);
    let mut pts = vec![CurvePoint { x: 0.0, y: 0.0 }];
    for (_, fp, tp) in threshold_counts(scores, labels) {
        pts.push(CurvePoint {
            x: if n > 0 { fp as f64 / n as f64 } else { 0.0 },
            y: if p > 0 { tp as f64 / p as f64 } else { 0.0 },
        });
    }
    pts
}

/// (recall, precision) at each distinct threshold, highest first.
pub fn pr_curve(scores: &[f64], labels: &[f64]) -> Vec<CurvePoint> {
    let (p, _) = class_counts(labels);
    threshold_counts(scores, labels)
        .into_iter()
        .map(|(_, fp, tp)| CurvePoint {
            x: if p > 0 { tp as f64 / p as f64 } else { 0.0 },
            y: tp as f64 / (tp + fp) as f64,
        })
        .collect()
}

pub fn mae(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    if pred.is_empty() {
        return f64::NAN;
    }
    pred.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean predicted probability.
    pub confidence: f64,
    /// Observed positive rate.
    pub accuracy: f64,
}

/// Equal-width probability bins; empty bins are omitted.
pub fn calibration_curve(probs: &[f64], labels: &[f64], bins: usize) -> Vec<CalibrationBin> {
    assert_eq!(probs.len(), labels.len());
    let bins = bins.max(1);
    let mut sum_p = vec![0.0; bins];
    let mut sum_y = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for (&p, &y) in probs.iter().zip(labels) {
        let b = ((p * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        sum_p[b] += p;
        sum_y[b] += y;
        count[b] += 1;
    }
    (0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| CalibrationBin {
            lower: b as f64 / bins as f64,
            upper: (b + 1) as f64 / bins as f64,
            count: count[b],
            confidence: sum_p[b] / count[b] as f64,
            accuracy: sum_y[b] / count[b] as f64,
        })
        .collect()
}

/// Expected calibration error over equal-width bins.
pub fn calibration_error(probs: &[f64], labels: &[f64], bins: usize) -> f64 {
    if probs.is_empty() {
        return f64::NAN;
    }
    let n = probs.len() as f64;
    calibration_curve(probs, labels, bins)
        .iter()
        .map(|b| b.count as f64 / n * (b.accuracy - b.confidence).abs())
        .sum()
}

/// Jensen–Shannon divergence (natural log) of the absolute values of two
/// vectors, each normalized to sum to one.
pub fn jsd(p_raw: &[f64], q_raw: &[f64]) -> f64 {
    assert_eq!(p_raw.len(), q_raw.len());
    let norm = |v: &[f64]| {
        let s: f64 = v.iter().map(|x| x.abs()).sum();
        v.iter().map(|x| x.abs() / s).collect::<Vec<f64>>()
    };
    let (p, q) = (norm(p_raw), norm(q_raw));
    let kl = |a: &[f64], m: &[f64]| {
        a.iter()
            .zip(m)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (x / y).ln())
            .sum::<f64>()
    };
    let m: Vec<f64> = p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect();
    (0.5 * kl(&p, &m) + 0.5 * kl(&q, &m)).clamp(0.0, std::f64::consts::LN_2)
}

/// Smallest over largest positivity rate (threshold 0.5) across groups.
pub fn demographic_parity_ratio<G: Ord + Clone>(preds: &[f64], groups: &[G]) -> f64 {
    assert_eq!(preds.len(), groups.len());
    let mut by_group: BTreeMap<G, (usize, usize)> = BTreeMap::new();
    for (p, g) in preds.iter().zip(groups) {
        let e = by_group.entry(g.clone()).or_default();
        e.0 += (*p >= 0.5) as usize;
        e.1 += 1;
    }
    let rates: Vec<f64> = by_group.values().map(|(k, n)| *k as f64 / *n as f64).collect();
    let lo = rates.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if rates.is_empty() {
        f64::NAN
    } else if hi == 0.0 {
        1.0
    } else {
        lo / hi
    }
}

/// Scalar metrics and curves for one evaluation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scalars: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roc: Option<Vec<CurvePoint>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pr: Option<Vec<CurvePoint>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<Vec<CalibrationBin>>,
}

pub const CALIBRATION_BINS: usize = 10;

impl MetricReport {
    pub fn classification(probs: &[f64], labels: &[f64]) -> Self {
        let mut scalars = BTreeMap::new();
        scalars.insert("auroc".into(), auroc(probs, labels));
        scalars.insert("auprc".into(), auprc(probs, labels));
        scalars.insert("ece".into(), calibration_error(probs, labels, CALIBRATION_BINS));
        scalars.insert("prevalence".into(), class_counts(labels).0 as f64 / labels.len().max(1) as f64);
        MetricReport {
            scalars,
            roc: Some(roc_curve(probs, labels)),
            pr: Some(pr_curve(probs, labels)),
            calibration: Some(calibration_curve(probs, labels, CALIBRATION_BINS)),
        }
    }

    pub fn regression(pred: &[f64], truth: &[f64]) -> Self {
        let mut scalars = BTreeMap::new();
        scalars.insert("mae".into(), mae(pred, truth));
        MetricReport {
            scalars,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    if n == 0 {
        return MeanStd {
            mean: f64::NAN,
            std: f64::NAN,
            n,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    MeanStd { mean, std: var.sqrt(), n }
}

/// Mean ± std of every scalar across fold reports.
pub fn aggregate(reports: &[MetricReport]) -> BTreeMap<String, MeanStd> {
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in reports {
        for (k, v) in &r.scalars {
            values.entry(k.clone()).or_default().push(*v);
        }
    }
    values.into_iter().map(|(k, v)| (k, mean_std(&v))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_case(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
        let n = rng.gen_range(2..200);
        // Coarse scores so that ties are common.
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0..12) as f64 / 11.0).collect();
        let mut y: Vec<f64> = (0..n).map(|_| rng.gen_bool(0.3) as u8 as f64).collect();
        y[0] = 1.0;
        y[1] = 0.0;
        (s, y)
    }

    fn pairwise_auroc(s: &[f64], y: &[f64]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] == 1.0 && y[j] == 0.0 {
                    den += 1.0;
                    num += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    fn enumerated_ap(s: &[f64], y: &[f64]) -> f64 {
        let mut th: Vec<f64> = s.to_vec();
        th.sort_by(|a, b| b.total_cmp(a));
        th.dedup();
        let p = y.iter().filter(|&&v| v == 1.0).count() as f64;
        let mut prev_r = 0.0;
        let mut ap = 0.0;
        for t in th {
            let tp = s.iter().zip(y).filter(|(a, b)| **a >= t && **b == 1.0).count() as f64;
            let k = s.iter().filter(|a| **a >= t).count() as f64;
            let r = tp / p;
            ap += (r - prev_r) * tp / k;
            prev_r = r;
        }
        ap
    }

    #[test]
    fn auroc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let (s, y) = random_case(&mut rng);
            assert_eq!(auroc(&s, &y), pairwise_auroc(&s, &y));
        }
    }

    #[test]
    fn auroc_trivial_cases() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0]), 1.0);
        assert_eq!(auroc(&[0.5; 4], &[0.0, 1.0, 0.0, 1.0]), 0.5);
        assert!(auroc(&[0.5; 2], &[1.0, 1.0]).is_nan());
    }

    #[test]
    fn auroc_ignores_monotone_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let (s, y) = random_case(&mut rng);
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            assert_eq!(auroc(&s, &y), auroc(&t, &y));
        }
    }

    #[test]
    fn auprc_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (s, y) = random_case(&mut rng);
            let ap = auprc(&s, &y);
            assert!((ap - enumerated_ap(&s, &y)).abs() < 1e-12);
            let prev = y.iter().sum::<f64>() / y.len() as f64;
            assert!(ap >= prev * prev);
        }
        assert_eq!(auprc(&[0.3; 4], &[1.0, 0.0, 0.0, 0.0]), 0.25);
        assert_eq!(auprc(&[0.9, 0.8, 0.1], &[1.0, 1.0, 0.0]), 1.0);
    }

    #[test]
    fn mae_cases() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((mae(&[3.5, 4.5], &[1.0, 2.0]) - 2.5).abs() < 1e-15);
        assert!((mae(&[1.0, -2.0, 0.5], &[0.0, 1.0, 0.0]) - (1.0 + 3.0 + 0.5) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn calibration_cases() {
        // Two bins, each perfectly calibrated.
        let p = [0.25, 0.25, 0.25, 0.25, 0.75, 0.75, 0.75, 0.75];
        let y = [1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        assert_eq!(calibration_error(&p, &y, 10), 0.0);
        assert_eq!(calibration_error(&[1.0; 4], &[1.0, 0.0, 1.0, 0.0], 10), 0.5);
        assert_eq!(calibration_error(&[1.0, 0.0], &[1.0, 0.0], 10), 0.0);
        // Hand computation: bins 0.1 (0.12, 0.18 -> conf 0.15, acc 0.5), 0.9 (0.95 -> acc 1).
        let e = calibration_error(&[0.12, 0.18, 0.95], &[0.0, 1.0, 1.0], 10);
        assert!((e - (2.0 / 3.0 * 0.35 + 1.0 / 3.0 * 0.05)).abs() < 1e-12);
        assert_eq!(calibration_curve(&[0.12, 0.18, 0.95], &[0.0, 1.0, 1.0], 10).len(), 2);
    }

    #[test]
    fn jsd_cases() {
        assert_eq!(jsd(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]), 0.0);
        assert!((jsd(&[1.0, 0.0], &[0.0, 1.0]) - std::f64::consts::LN_2).abs() < 1e-15);
        let (p, q) = ([0.5, 0.5, 0.0], [0.0, 0.5, 0.5]);
        let m = [0.25, 0.5, 0.25];
        let hand = 0.5 * (0.5 * (0.5f64 / m[0]).ln() + 0.5 * (0.5f64 / m[1]).ln())
            + 0.5 * (0.5 * (0.5f64 / m[1]).ln() + 0.5 * (0.5f64 / m[2]).ln());
        assert!((jsd(&p, &q) - hand).abs() < 1e-15);
        assert_eq!(jsd(&[-1.0, 2.0, 0.3], &[0.2, 0.1, 4.0]), jsd(&[0.2, 0.1, 4.0], &[1.0, 2.0, 0.3]));
    }

    #[test]
    fn parity_cases() {
        assert_eq!(demographic_parity_ratio(&[0.9, 0.1, 0.9, 0.1], &["a", "a", "b", "b"]), 1.0);
        let preds: Vec<f64> = (0..10).map(|i| if i < 2 { 0.9 } else { 0.1 }).chain((0..10).map(|i| if i < 4 { 0.7 } else { 0.2 })).collect();
        let groups: Vec<u8> = (0..20).map(|i| (i >= 10) as u8).collect();
        assert!((demographic_parity_ratio(&preds, &groups) - 0.5).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let preds: Vec<f64> = (0..300).map(|_| rng.gen()).collect();
        let groups: Vec<u8> = (0..300).map(|_| rng.gen_range(0..4)).collect();
        let rates: Vec<f64> = (0..4u8)
            .map(|g| {
                let m: Vec<&f64> = preds.iter().zip(&groups).filter(|(_, h)| **h == g).map(|(p, _)| p).collect();
                m.iter().filter(|p| ***p >= 0.5).count() as f64 / m.len() as f64
            })
            .collect();
        let lo = rates.iter().cloned().fold(1.0, f64::min);
        let hi = rates.iter().cloned().fold(0.0, f64::max);
        assert_eq!(demographic_parity_ratio(&preds, &groups), lo / hi);
    }

    #[test]
    fn aggregation_uses_population_std() {
        let rep = |v: f64| MetricReport {
            scalars: [("auroc".to_string(), v)].into(),
            ..Default::default()
        };
        assert_eq!(aggregate(&[rep(0.7)])["auroc"].std, 0.0);
        let a = aggregate(&[rep(0.8), rep(0.9)])["auroc"];
        assert!((a.mean - 0.85).abs() < 1e-15 && (a.std - 0.05).abs() < 1e-12);
        let vals: Vec<f64> = (0..25).map(|i| 0.6 + 0.01 * (i * 7 % 25) as f64).collect();
        let reps: Vec<MetricReport> = vals.iter().map(|&v| rep(v)).collect();
        let m = vals.iter().sum::<f64>() / 25.0;
        let s = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 25.0).sqrt();
        let a = aggregate(&reps)["auroc"];
        assert!((a.mean - m).abs() < 1e-12 && (a.std - s).abs() < 1e-12);
    }
}
