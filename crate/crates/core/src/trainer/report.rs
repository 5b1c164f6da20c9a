use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use super::ensemble::Ensemble;
use super::metrics::{group_metrics, GroupMetrics};
use super::probe::{cohort_probe, ProbeConfig};
use super::TrainError;
use crate::mil::Bag;

/// Task metrics at patient level, overall and per cohort, plus the cohort
/// probe on slide representations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: GroupMetrics,
    pub per_cohort: Vec<GroupMetrics>,
    pub probe_auc: Option<f64>,
    /// Unweighted mean slide cross-entropy of the ensemble.
    pub task_loss: f64,
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
        let mut out = String::from("group\tpatients\tslides\tauc\tbalanced_accuracy\n");
        let mut row = |name: String, g: &GroupMetrics| {
            let _ = writeln!(
                out,
                "{name}\t{}\t{}\t{}\t{}",
                g.patients,
                g.slides,
                fmt(g.auc),
                fmt(g.balanced_accuracy)
            );
        };
        row("overall".into(), &self.overall);
        for (c, g) in self.per_cohort.iter().enumerate() {
            row(format!("cohort_{c}"), g);
        }
        let _ = writeln!(out, "probe_auc\t{}", fmt(self.probe_auc));
        let _ = writeln!(out, "task_loss\t{:.6}", self.task_loss);
        out
    }
}

/// Scores every bag with the ensemble, reduces slides to patients by the
/// mean probability vector and computes AUC and balanced accuracy. The
/// probe, when requested, is fit on the best member's representations.
pub fn evaluate(
    ensemble: &Ensemble,
    bags: &[Bag],
    classes: usize,
    cohorts: usize,
    probe: Option<&ProbeConfig>,
) -> Result<MetricsReport, TrainError> {
    if bags.is_empty() {
        return Err(TrainError::Data("evaluation set is empty".into()));
    }
    if let Some(b) = bags.iter().find(|b| b.label >= classes || b.cohort.0 >= cohorts) {
        return Err(TrainError::Data(format!("bag {} has label or cohort out of range", b.slide_id)));
    }
    let mut probs = Vec::with_capacity(bags.len());
    for b in bags {
        probs.push(ensemble.predict(&b.features)?);
    }
    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    let keys: Vec<(usize, String)> = bags.iter().map(|b| (b.cohort.0, b.patient_id.clone())).collect();
    let (overall, mut per_cohort) = group_metrics(&keys, &probs, &labels, classes);
    per_cohort.resize(
        cohorts,
        GroupMetrics {
            auc: None,
            balanced_accuracy: None,
            patients: 0,
            slides: 0,
        },
    );
    let task_loss = probs
        .iter()
        .zip(&labels)
        .map(|(p, &y)| -p[y].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / bags.len() as f64;
    let probe_auc = match probe {
        None => None,
        Some(cfg) => {
            let z = bags
                .iter()
                .map(|b| ensemble.representation(&b.features))
                .collect::<Result<Vec<_>, _>>()?;
            let c: Vec<usize> = bags.iter().map(|b| b.cohort.0).collect();
            match cohort_probe(&z, &c, cfg) {
                Ok(a) => Some(a),
                Err(e) => {
                    warn!("event=probe_skipped reason=\"{e}\"");
                    None
                }
            }
        }
    };
    Ok(MetricsReport {
        overall,
        per_cohort,
        probe_auc,
        task_loss,
    })
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub mil_loss: f64,
    pub mi_loss: Option<f64>,
    pub adversary_estimate: Option<f64>,
    pub val_auc: Option<f64>,
    pub steps: usize,
    /// Batches skipped because all their weights were zero.
    pub skipped: usize,
}

impl EpochLog {
    pub fn to_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| format!("{x:.6}"));
        format!(
            "epoch={} loss={:.6} mil_loss={:.6} mi_loss={} adversary_estimate={} val_auc={} steps={} skipped={}",
            self.epoch,
            self.loss,
            self.mil_loss,
            opt(self.mi_loss),
            opt(self.adversary_estimate),
            opt(self.val_auc),
            self.steps,
            self.skipped
        )
    }
}

/// Mean and sample standard deviation over the folds where a metric is
/// defined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }

    fn of_options(values: impl Iterator<Item = Option<f64>>) -> Option<Self> {
        Self::of(&values.flatten().collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub folds: usize,
    pub auc: Option<MeanStd>,
    pub balanced_accuracy: Option<MeanStd>,
    pub per_cohort_auc: Vec<Option<MeanStd>>,
    pub per_cohort_balanced_accuracy: Vec<Option<MeanStd>>,
    pub probe_auc: Option<MeanStd>,
}

/// Folds reports into mean ± std, in fold order.
pub fn aggregate(reports: &[MetricsReport]) -> AggregateReport {
    let cohorts = reports.iter().map(|r| r.per_cohort.len()).max().unwrap_or(0);
    let per = |f: fn(&GroupMetrics) -> Option<f64>| -> Vec<Option<MeanStd>> {
        (0..cohorts)
            .map(|c| MeanStd::of_options(reports.iter().map(|r| r.per_cohort.get(c).and_then(f))))
            .collect()
    };
    AggregateReport {
        folds: reports.len(),
        auc: MeanStd::of_options(reports.iter().map(|r| r.overall.auc)),
        balanced_accuracy: MeanStd::of_options(reports.iter().map(|r| r.overall.balanced_accuracy)),
        per_cohort_auc: per(|g| g.auc),
        per_cohort_balanced_accuracy: per(|g| g.balanced_accuracy),
        probe_auc: MeanStd::of_options(reports.iter().map(|r| r.probe_auc)),
    }
}

impl AggregateReport {
    pub fn to_text(&self) -> String {
        let fmt = |v: &Option<MeanStd>| match v {
            Some(m) => format!("{:.4} ± {:.4} (n={})", m.mean, m.std, m.n),
            None => "undefined".into(),
        };
        let mut out = format!("folds\t{}\n", self.folds);
        out.push_str("group\tauc\tbalanced_accuracy\n");
        let _ = writeln!(out, "overall\t{}\t{}", fmt(&self.auc), fmt(&self.balanced_accuracy));
        for (c, (a, b)) in self
            .per_cohort_auc
            .iter()
            .zip(&self.per_cohort_balanced_accuracy)
            .enumerate()
        {
            let _ = writeln!(out, "cohort_{c}\t{}\t{}", fmt(a), fmt(b));
        }
        let _ = writeln!(out, "probe_auc\t{}", fmt(&self.probe_auc));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort_attention::CohortId;
    use crate::diffcore::Tensor;
    use crate::init::rng;
    use crate::mil::{AggregatorKind, MilConfig, MilParams};

    fn group(auc: Option<f64>) -> GroupMetrics {
        GroupMetrics {
            auc,
            balanced_accuracy: auc,
            patients: 4,
            slides: 4,
        }
    }

    #[test]
    fn aggregate_sample_std_skips_undefined() {
        let r = |a: Option<f64>| MetricsReport {
            overall: group(a),
            per_cohort: vec![group(a), group(None)],
            probe_auc: None,
            task_loss: 0.0,
        };
        let agg = aggregate(&[r(Some(0.6)), r(Some(0.8)), r(None)]);
        let auc = agg.auc.unwrap();
        assert_eq!(auc.n, 2);
        assert!((auc.mean - 0.7).abs() < 1e-15);
        assert!((auc.std - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!(agg.per_cohort_auc[1], None);
        assert!(agg.to_text().contains("undefined"));
    }

    #[test]
    fn evaluate_flags_missing_class() {
        let m = MilParams::init(MilConfig::new(AggregatorKind::Mean, 2, 2), &mut rng(0)).unwrap();
        let bags: Vec<Bag> = (0..4)
            .map(|i| Bag {
                slide_id: format!("s{i}"),
                patient_id: format!("p{i}"),
                cohort: CohortId(i % 2),
                label: 0,
                features: Tensor::matrix(1, 2, vec![i as f64, 1.0]),
                weight: 1.0,
            })
            .collect();
        let r = evaluate(&Ensemble::single(m), &bags, 2, 3, None).unwrap();
        assert_eq!(r.overall.auc, None);
        assert_eq!(r.overall.balanced_accuracy, None);
        assert_eq!(r.per_cohort.len(), 3);
        assert!(r.to_text().contains("undefined"));
    }
}
