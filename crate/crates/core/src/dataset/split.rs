use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetError};
use crate::init::rng;

/// Slide indices of one cross-validation fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Fold {
    /// Patients `(cohort, patient_id)` behind a list of slide indices.
    pub fn patients(dataset: &Dataset, idx: &[usize]) -> BTreeSet<(usize, String)> {
        idx.iter().map(|&i| dataset.slides[i].patient_key()).collect()
    }
}

/// Fraction of each fold's training patients held out for validation.
pub const VAL_FRACTION: f64 = 0.1;

/// Patient-level K-fold split stratified by `(cohort, class)`.
///
/// Patients of each stratum are shuffled and dealt round-robin over the folds,
/// continuing the deal across strata so fold sizes stay balanced. Each fold's
/// validation set takes the first 10% of its training patients after ordering
/// them by relative position inside their stratum, which keeps validation
/// stratified as well.
pub fn stratified_patient_kfold(dataset: &Dataset, folds: usize, seed: u64) -> Result<Vec<Fold>, DatasetError> {
    if folds < 2 {
        return Err(DatasetError::Config(format!("need at least 2 folds, got {folds}")));
    }
    dataset.validate()?;
    let mut strata: BTreeMap<(usize, usize), Vec<(usize, String)>> = BTreeMap::new();
    for (key, label) in dataset.patients() {
        strata.entry((key.0, label)).or_default().push(key);
    }
    for (&(cohort, class), members) in &strata {
        if members.len() < folds {
            return Err(DatasetError::StratumTooSmall {
                cohort,
                class,
                patients: members.len(),
                folds,
            });
        }
    }
    let mut r = rng(seed);
    for members in strata.values_mut() {
        members.shuffle(&mut r);
    }

    let mut assignment: BTreeMap<(usize, String), usize> = BTreeMap::new();
    let mut offset = 0;
    for members in strata.values() {
        for (i, key) in members.iter().enumerate() {
            assignment.insert(key.clone(), (offset + i) % folds);
        }
        offset += members.len();
    }

    let mut by_patient: BTreeMap<(usize, String), Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.slides.iter().enumerate() {
        by_patient.entry(s.patient_key()).or_default().push(i);
    }

    let mut out = Vec::with_capacity(folds);
    for f in 0..folds {
        let mut train_patients = Vec::new();
        for (s, members) in strata.values().enumerate() {
            let in_train: Vec<_> = members.iter().filter(|k| assignment[*k] != f).collect();
            let n = in_train.len() as f64;
            for (i, key) in in_train.into_iter().enumerate() {
                train_patients.push(((i as f64 + 0.5) / n, s, key.clone()));
            }
        }
        train_patients.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let n_val = ((VAL_FRACTION * train_patients.len() as f64).round() as usize).max(1);
        let val_keys: BTreeSet<_> = train_patients[..n_val].iter().map(|t| t.2.clone()).collect();

        let mut fold = Fold {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (key, slides) in &by_patient {
            let target = if assignment[key] == f {
                &mut fold.test
            } else if val_keys.contains(key) {
                &mut fold.val
            } else {
                &mut fold.train
            };
            target.extend(slides);
        }
        fold.train.sort_unstable();
        fold.val.sort_unstable();
        fold.test.sort_unstable();
        out.push(fold);
    }
    Ok(out)
}
