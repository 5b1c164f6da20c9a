//! AUC, balanced accuracy, and patient-level reduction of slide predictions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Binary ROC AUC by pair counting: each (positive, negative) pair scores 1
/// when the positive ranks higher and ½ on a tie. `None` when either class is
/// absent.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len(), "scores and labels differ in length");
    let mut neg: Vec<f64> = scores
        .iter()
        .zip(positive)
        .filter(|(_, &p)| !p)
        .map(|(&s, _)| s)
        .collect();
    let n_pos = positive.iter().filter(|&&p| p).count() as u64;
    let n_neg = neg.len() as u64;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    neg.sort_by(f64::total_cmp);
    // twice the Mann-Whitney U, kept integral
    let mut twice_u = 0u64;
    for (&s, _) in scores.iter().zip(positive).filter(|(_, &p)| p) {
        let below = neg.partition_point(|&x| x < s) as u64;
        let at_or_below = neg.partition_point(|&x| x <= s) as u64;
        twice_u += 2 * below + (at_or_below - below);
    }
    Some(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// Macro one-vs-rest AUC over classes that have both positives and
/// negatives; for two classes this is the AUC of class 1.
pub fn multiclass_auc(probs: &[Vec<f64>], labels: &[usize], classes: usize) -> Option<f64> {
    if classes == 2 {
        let s: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let pos: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        return auc(&s, &pos);
    }
    let per: Vec<f64> = (0..classes)
        .filter_map(|c| {
            let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            auc(&s, &pos)
        })
        .collect();
    if per.len() < classes {
        return None;
    }
    Some(per.iter().sum::<f64>() / per.len() as f64)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Mean per-class recall of argmax predictions; `None` if any class is
/// absent from `labels`.
pub fn balanced_accuracy(probs: &[Vec<f64>], labels: &[usize], classes: usize) -> Option<f64> {
    let mut hit = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (p, &y) in probs.iter().zip(labels) {
        total[y] += 1;
        if argmax(p) == y {
            hit[y] += 1;
        }
    }
    if total.contains(&0) {
        return None;
    }
    Some(hit.iter().zip(&total).map(|(&h, &t)| h as f64 / t as f64).sum::<f64>() / classes as f64)
}

/// Patient-level predictions: mean of each patient's slide probability
/// vectors, in patient-key order.
pub fn patient_reduce<K: Ord + Clone>(
    keys: &[K],
    probs: &[Vec<f64>],
    labels: &[usize],
) -> (Vec<K>, Vec<Vec<f64>>, Vec<usize>) {
    let mut acc: BTreeMap<K, (Vec<f64>, usize, usize)> = BTreeMap::new();
    for ((k, p), &y) in keys.iter().zip(probs).zip(labels) {
        let e = acc.entry(k.clone()).or_insert_with(|| (vec![0.0; p.len()], 0, y));
        for (a, v) in e.0.iter_mut().zip(p) {
            *a += v;
        }
        e.1 += 1;
    }
    let mut out_k = Vec::with_capacity(acc.len());
    let mut out_p = Vec::with_capacity(acc.len());
    let mut out_y = Vec::with_capacity(acc.len());
    for (k, (sum, n, y)) in acc {
        out_k.push(k);
        out_p.push(sum.into_iter().map(|v| v / n as f64).collect());
        out_y.push(y);
    }
    (out_k, out_p, out_y)
}

/// Task metrics for one group of patients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub auc: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub patients: usize,
    pub slides: usize,
}

/// Overall and per-cohort patient-level metrics of slide predictions.
pub fn group_metrics(
    patient_keys: &[(usize, String)],
    probs: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
) -> (GroupMetrics, Vec<GroupMetrics>) {
    let compute = |idx: &[usize]| {
        let keys: Vec<_> = idx.iter().map(|&i| patient_keys[i].clone()).collect();
        let p: Vec<_> = idx.iter().map(|&i| probs[i].clone()).collect();
        let y: Vec<_> = idx.iter().map(|&i| labels[i]).collect();
        let (pk, pp, py) = patient_reduce(&keys, &p, &y);
        GroupMetrics {
            auc: multiclass_auc(&pp, &py, classes),
            balanced_accuracy: balanced_accuracy(&pp, &py, classes),
            patients: pk.len(),
            slides: idx.len(),
        }
    };
    let all: Vec<usize> = (0..probs.len()).collect();
    let overall = compute(&all);
    let cohorts = patient_keys.iter().map(|k| k.0).max().map_or(0, |c| c + 1);
    let per = (0..cohorts)
        .map(|c| {
            let idx: Vec<usize> = all.iter().copied().filter(|&i| patient_keys[i].0 == c).collect();
            compute(&idx)
        })
        .collect();
    (overall, per)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        let y = [true, true, false, false];
        assert_eq!(auc(&[0.9, 0.8, 0.3, 0.2], &y), Some(1.0));
        assert_eq!(auc(&[0.9, 0.3, 0.8, 0.2], &y), Some(0.75));
        assert_eq!(auc(&[0.5, 0.5, 0.5, 0.5], &y), Some(0.5));
        assert_eq!(auc(&[0.1, 0.2], &[true, true]), None);
    }

    #[test]
    fn bacc_all_zero_predictions() {
        let p = vec![vec![0.9, 0.1]; 4];
        assert_eq!(balanced_accuracy(&p, &[0, 0, 1, 1], 2), Some(0.5));
        assert_eq!(balanced_accuracy(&p, &[0, 0, 0, 0], 2), None);
    }

    #[test]
    fn patient_mean() {
        let keys = ["b", "a", "b"];
        let probs = vec![vec![0.2, 0.8], vec![0.5, 0.5], vec![0.4, 0.6]];
        let (k, p, y) = patient_reduce(&keys, &probs, &[1, 0, 1]);
        assert_eq!(k, vec!["a", "b"]);
        assert!((p[1][1] - 0.7).abs() < 1e-15);
        assert_eq!(y, vec![0, 1]);
    }

    #[test]
    fn multiclass_macro() {
        let probs = vec![
            vec![0.8, 0.1, 0.1],
            vec![0.1, 0.8, 0.1],
            vec![0.1, 0.1, 0.8],
        ];
        assert_eq!(multiclass_auc(&probs, &[0, 1, 2], 3), Some(1.0));
        assert_eq!(multiclass_auc(&probs, &[0, 1, 1], 3), None);
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }
}
