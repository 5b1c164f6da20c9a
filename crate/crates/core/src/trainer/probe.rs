//! Linear probe predicting cohort membership from slide representations.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::multiclass_auc;
use super::TrainError;
use crate::init::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub train_fraction: f64,
    pub l2: f64,
    /// Stop once the largest gradient entry falls below this.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            l2: 1e-4,
            tol: 1e-6,
            max_iter: 5000,
            seed: 0,
        }
    }
}

/// Multinomial logistic regression on standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticModel {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[d + 1][classes]`, last row is the bias.
    weights: Vec<Vec<f64>>,
    pub iterations: usize,
}

impl LogisticModel {
    pub fn fit(x: &[Vec<f64>], y: &[usize], classes: usize, config: &ProbeConfig) -> Self {
        let n = x.len();
        let d = x[0].len();
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let v = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
                if v > 0.0 { v.sqrt() } else { 1.0 }
            })
            .collect();
        let xs: Vec<Vec<f64>> = x
            .iter()
            .map(|r| {
                let mut s: Vec<f64> = r.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect();
                s.push(1.0);
                s
            })
            .collect();
        // the largest Hessian eigenvalue is at most ½·trace(XᵀX/n) + l2
        let lr = 1.0 / (0.5 * (d + 1) as f64 + config.l2);
        let mut w = vec![vec![0.0; classes]; d + 1];
        let mut iterations = 0;
        while iterations < config.max_iter {
            iterations += 1;
            let mut grad = vec![vec![0.0; classes]; d + 1];
            for (row, &label) in xs.iter().zip(y) {
                let p = softmax(&logits(row, &w));
                for (j, &xv) in row.iter().enumerate() {
                    for c in 0..classes {
                        let target = if c == label { 1.0 } else { 0.0 };
                        grad[j][c] += (p[c] - target) * xv / n as f64;
                    }
                }
            }
            let mut worst: f64 = 0.0;
            for j in 0..=d {
                for c in 0..classes {
                    if j < d {
                        grad[j][c] += config.l2 * w[j][c];
                    }
                    worst = worst.max(grad[j][c].abs());
                    w[j][c] -= lr * grad[j][c];
                }
            }
            if worst < config.tol {
                break;
            }
        }
        Self {
            mean,
            scale,
            weights: w,
            iterations,
        }
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let mut s: Vec<f64> = x
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        s.push(1.0);
        softmax(&logits(&s, &self.weights))
    }
}

fn logits(row: &[f64], w: &[Vec<f64>]) -> Vec<f64> {
    let classes = w[0].len();
    (0..classes).map(|c| row.iter().zip(w).map(|(x, wr)| x * wr[c]).sum()).collect()
}

fn softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Trains a fresh linear classifier on a stratified 70/30 split of
/// `(z, cohort)` and returns its held-out macro one-vs-rest AUC.
pub fn cohort_probe(z: &[Vec<f64>], cohorts: &[usize], config: &ProbeConfig) -> Result<f64, TrainError> {
    if z.len() != cohorts.len() || z.is_empty() {
        return Err(TrainError::Data("probe needs one cohort label per representation".into()));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in cohorts.iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(TrainError::SingleCohort);
    }
    let mut r = rng(config.seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for members in groups.values_mut() {
        members.shuffle(&mut r);
        let n = members.len();
        let k = ((config.train_fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
        train.extend_from_slice(&members[..k]);
        test.extend_from_slice(&members[k..]);
    }
    // dense class index over the cohorts that occur
    let index: BTreeMap<usize, usize> = groups.keys().enumerate().map(|(i, &c)| (c, i)).collect();
    let classes = index.len();
    let xs: Vec<Vec<f64>> = train.iter().map(|&i| z[i].clone()).collect();
    let ys: Vec<usize> = train.iter().map(|&i| index[&cohorts[i]]).collect();
    let model = LogisticModel::fit(&xs, &ys, classes, config);
    let probs: Vec<Vec<f64>> = test.iter().map(|&i| model.predict(&z[i])).collect();
    let labels: Vec<usize> = test.iter().map(|&i| index[&cohorts[i]]).collect();
    multiclass_auc(&probs, &labels, classes)
        .ok_or_else(|| TrainError::Data("held-out probe split lacks a cohort; need more samples".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn one_hot_is_separable() {
        let cohorts: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let z: Vec<Vec<f64>> = cohorts
            .iter()
            .map(|&c| (0..3).map(|j| if j == c { 1.0 } else { 0.0 }).collect())
            .collect();
        assert_eq!(cohort_probe(&z, &cohorts, &ProbeConfig::default()).unwrap(), 1.0);
    }

    // A single draw of 1000 (300 held out) has sampling spread near 0.04,
    // so the band is checked on the mean of 20 independent draws.
    #[test]
    fn noise_is_chance() {
        let cohorts: Vec<usize> = (0..1000).map(|i| i % 2).collect();
        let mut total = 0.0;
        for seed in 0..20u64 {
            let mut r = rng(seed);
            let z: Vec<Vec<f64>> = (0..1000)
                .map(|_| (0..4).map(|_| StandardNormal.sample(&mut r)).collect())
                .collect();
            let config = ProbeConfig { seed, ..Default::default() };
            let a = cohort_probe(&z, &cohorts, &config).unwrap();
            assert!((a - 0.5).abs() < 0.15, "{a}");
            total += a;
        }
        let mean = total / 20.0;
        assert!((mean - 0.5).abs() < 0.05, "{mean}");
    }

    #[test]
    fn single_cohort_rejected() {
        let z = vec![vec![0.0]; 4];
        assert!(matches!(
            cohort_probe(&z, &[1, 1, 1, 1], &ProbeConfig::default()),
            Err(TrainError::SingleCohort)
        ));
    }

    #[test]
    fn converges_on_overlapping_classes() {
        let mut r = rng(4);
        let y: Vec<usize> = (0..200).map(|i| i % 2).collect();
        let x: Vec<Vec<f64>> = y
            .iter()
            .map(|&c| {
                let n: f64 = StandardNormal.sample(&mut r);
                vec![n + c as f64]
            })
            .collect();
        let m = LogisticModel::fit(&x, &y, 2, &ProbeConfig::default());
        assert!(m.iterations < 5000);
        assert!(m.predict(&[3.0])[1] > 0.9);
    }
}
