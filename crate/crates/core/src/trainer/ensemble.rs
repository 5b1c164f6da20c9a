use log::warn;

use crate::diffcore::Tensor;
use crate::error::Result;
use crate::mil::{aggregate, predict, MilParams};

/// Bagged MIL models. Predictions are the mean of the members' probability
/// vectors; representations come from the best member alone, since the
/// members' embedding spaces are not aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    /// Best first.
    pub members: Vec<MilParams>,
    pub val_auc: Vec<Option<f64>>,
    pub epochs: Vec<usize>,
}

impl Ensemble {
    pub fn single(model: MilParams) -> Self {
        Self {
            members: vec![model],
            val_auc: vec![None],
            epochs: vec![0],
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn best(&self) -> &MilParams {
        &self.members[0]
    }

    pub fn predict(&self, features: &Tensor) -> Result<Vec<f64>> {
        let mut acc: Vec<f64> = Vec::new();
        for m in &self.members {
            let p = predict(&aggregate(features, m)?, m)?;
            if acc.is_empty() {
                acc = p;
            } else {
                for (a, v) in acc.iter_mut().zip(p) {
                    *a += v;
                }
            }
        }
        let k = self.members.len() as f64;
        Ok(acc.into_iter().map(|v| v / k).collect())
    }

    pub fn representation(&self, features: &Tensor) -> Result<Vec<f64>> {
        aggregate(features, self.best())
    }
}

/// Keeps the `k` candidates with the highest validation patient AUC.
///
/// Undefined AUCs rank last; ties go to the later epoch. With fewer than `k`
/// candidates all of them are used and a warning is logged.
pub fn bag_models(candidates: Vec<(usize, Option<f64>, MilParams)>, k: usize) -> Ensemble {
    if candidates.len() < k {
        warn!(
            "event=bagging_short available={} requested={k} action=use_all",
            candidates.len()
        );
    }
    let mut ranked = candidates;
    ranked.sort_by(|a, b| {
        let key = |x: Option<f64>| x.unwrap_or(f64::NEG_INFINITY);
        key(b.1).total_cmp(&key(a.1)).then(b.0.cmp(&a.0))
    });
    ranked.truncate(k);
    let mut out = Ensemble {
        members: Vec::with_capacity(ranked.len()),
        val_auc: Vec::with_capacity(ranked.len()),
        epochs: Vec::with_capacity(ranked.len()),
    };
    for (epoch, auc, m) in ranked {
        out.epochs.push(epoch);
        out.val_auc.push(auc);
        out.members.push(m);
    }
    out
}
