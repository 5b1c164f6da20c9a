use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::balancing::batch_renormalize;
use crate::cohort_attention::CohortId;
use crate::diffcore::{Adam, Graph};
use crate::error::ModelError;
use crate::mi_adversary::{has_multiple_cohorts, one_hot, MiEstimator};
use crate::mil::{aggregate_graph, head_logits, mil_loss_graph, Bag, MilParams};

/// Loss values of one step. `total = mil + λ·mi` whenever `mi` is present.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub total: f64,
    pub mil: f64,
    /// Signed MI term after the adversary update; `None` when skipped.
    pub mi: Option<f64>,
    /// Adversary's estimate before its update.
    pub adversary_estimate: Option<f64>,
}

/// One mini-batch update.
///
/// Order: slide representations are computed once; the adversary takes
/// `ascent_steps` (default one) ascent steps on their detached values; the frozen adversary re-estimates
/// the MI term with gradient into the representations; the head predicts;
/// the MIL model descends `L_MIL + λ·L_MI`, where `L_MIL` uses the bags'
/// weights rescaled to unit batch mean.
///
/// Batches with a single cohort skip both adversary work and the MI term.
/// With `λ = 0` the MI term is never recorded into the graph, so the model
/// update is identical to training without an adversary.
pub fn train_step(
    model: &mut MilParams,
    opt: &mut Adam,
    adversary: Option<&mut MiEstimator>,
    batch: &[Bag],
    lambda: f64,
) -> Result<LossRecord, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Data("empty batch".into()));
    }
    let cohorts: Vec<CohortId> = batch.iter().map(|b| b.cohort).collect();
    let labels: Vec<usize> = batch.iter().map(|b| b.label).collect();
    let raw: Vec<f64> = batch.iter().map(|b| b.weight).collect();
    let weights = batch_renormalize(&raw).map_err(|_| ModelError::ZeroWeights)?;

    let mut g = Graph::new();
    let nodes = model.bind(&mut g)?;
    let zs = batch
        .iter()
        .map(|b| {
            let f = g.constant(b.features.clone())?;
            aggregate_graph(&mut g, f, &nodes)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let z = g.concat_rows(&zs).map_err(ModelError::from)?;

    let mut adversary_estimate = None;
    let mut mi_node = None;
    let mut mi_value = None;
    if let Some(adv) = adversary {
        if batch.len() >= 2 && has_multiple_cohorts(&cohorts) {
            let cs = one_hot(&cohorts, adv.d_c)?;
            let z_detached = g.value(z).clone();
            adversary_estimate = Some(adv.adversary_update(&z_detached, &cs)?);
            for _ in 1..adv.config.ascent_steps {
                adv.adversary_update(&z_detached, &cs)?;
            }
            if lambda > 0.0 {
                let node = adv.mi_loss(&mut g, z, &cs)?;
                mi_value = Some(g.value(node).item());
                mi_node = Some(node);
            } else {
                mi_value = Some(adv.config.sign.factor() * adv.smile_estimate(&z_detached, &cs)?);
            }
        }
    }

    let logits = head_logits(&mut g, z, &nodes)?;
    let log_probs = g.log_softmax_rows(logits).map_err(ModelError::from)?;
    let mil = mil_loss_graph(&mut g, log_probs, &labels, &weights)?;
    let mil_value = g.value(mil).item();
    let total = match mi_node {
        Some(mi) => {
            let scaled = g.scale(mi, lambda).map_err(ModelError::from)?;
            g.add(mil, scaled).map_err(ModelError::from)?
        }
        None => mil,
    };
    let total_value = g.value(total).item();
    if !total_value.is_finite() {
        return Err(TrainError::NonFinite("training loss".into()));
    }
    let grads = g.backward_scalar(total).map_err(ModelError::from)?;
    let grads = model.store.collect_grads(&grads, &nodes.bound);
    opt.step(&mut model.store, &grads);
    Ok(LossRecord {
        total: match mi_node {
            Some(_) => total_value,
            None => mil_value + lambda * mi_value.unwrap_or(0.0),
        },
        mil: mil_value,
        mi: mi_value,
        adversary_estimate,
    })
}
