//! Property tests for weights, metrics, estimators and splits, each checked
//! against a direct re-computation.

use std::collections::{BTreeMap, BTreeSet};

use cohort_mil::balancing::{batch_renormalize, clip_weights, mil_weights, pretrain_weights, SlideLabel, SlideTiles};
use cohort_mil::dataset::{generate, stratified_patient_kfold, Fold, InstanceKind, SynthConfig};
use cohort_mil::diffcore::Tensor;
use cohort_mil::init::rng;
use cohort_mil::mi_adversary::estimate_from_scores;
use cohort_mil::mil::{AggregatorKind, MilConfig, MilParams};
use cohort_mil::trainer::bag_models;
use cohort_mil::trainer::metrics::auc;
use proptest::prelude::*;

fn pair_count_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &pi) in positive.iter().enumerate() {
        for (j, &pj) in positive.iter().enumerate() {
            if pi && !pj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

fn tiles_strategy() -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((0usize..4, 1usize..40), 1..30)
}

proptest! {
    #[test]
    fn pretrain_weights_sum_to_one_with_equal_cohort_shares(slides in tiles_strategy()) {
        let input: Vec<SlideTiles> = slides
            .iter()
            .enumerate()
            .map(|(i, &(cohort, tiles))| SlideTiles { cohort, slide_id: format!("s{i}"), tiles })
            .collect();
        let w = pretrain_weights(&input).unwrap();
        let mut per: BTreeMap<usize, f64> = BTreeMap::new();
        for (s, w) in input.iter().zip(&w) {
            *per.entry(s.cohort).or_default() += w * s.tiles as f64;
        }
        let total: f64 = per.values().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        let share = 1.0 / per.len() as f64;
        for v in per.values() {
            prop_assert!((v - share).abs() < 1e-12);
        }
    }

    #[test]
    fn mil_weights_equalize_cohort_class_combinations(slides in prop::collection::vec((0usize..3, 0usize..3), 1..40)) {
        let input: Vec<SlideLabel> = slides
            .iter()
            .enumerate()
            .map(|(i, &(cohort, label))| SlideLabel { cohort, slide_id: format!("s{i}"), label })
            .collect();
        let w = mil_weights(&input).unwrap();
        let mut per: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (s, w) in input.iter().zip(&w) {
            *per.entry((s.cohort, s.label)).or_default() += w;
        }
        let first = *per.values().next().unwrap();
        for v in per.values() {
            prop_assert!((v - first).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_stays_within_two_sigma(w in prop::collection::vec(0.0f64..50.0, 2..40)) {
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        let (lo, hi) = ((mean - 2.0 * std).max(0.0), mean + 2.0 * std);
        let clipped = clip_weights(&w).unwrap();
        for (raw, c) in w.iter().zip(&clipped) {
            prop_assert!(*c >= lo - 1e-12 && *c <= hi + 1e-12);
            if *raw >= lo && *raw <= hi {
                prop_assert_eq!(raw, c);
            }
        }
    }

    #[test]
    fn renormalized_batch_has_unit_mean(w in prop::collection::vec(0.0f64..10.0, 1..64)) {
        prop_assume!(w.iter().any(|&x| x > 0.0));
        let b = batch_renormalize(&w).unwrap();
        prop_assert!((b.iter().sum::<f64>() / b.len() as f64 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auc_matches_pair_counting(cases in prop::collection::vec((0u8..6, any::<bool>()), 1..=20)) {
        // scores on a coarse grid so ties are common
        let scores: Vec<f64> = cases.iter().map(|&(s, _)| s as f64 * 0.25).collect();
        let positive: Vec<bool> = cases.iter().map(|&(_, p)| p).collect();
        prop_assert_eq!(auc(&scores, &positive), pair_count_auc(&scores, &positive));
    }

    #[test]
    fn unclipped_smile_is_mine(values in prop::collection::vec(-3.0f64..3.0, 4..=36)) {
        let b = (values.len() as f64).sqrt() as usize;
        prop_assume!(b >= 2);
        let t = Tensor::matrix(b, b, values[..b * b].to_vec());
        let pos = (0..b).map(|i| t.get(i, i)).sum::<f64>() / b as f64;
        let mut neg = 0.0;
        for i in 0..b {
            for j in 0..b {
                if i != j {
                    neg += t.get(i, j).exp();
                }
            }
        }
        let mine = pos - (neg / (b * (b - 1)) as f64).ln();
        let est = estimate_from_scores(&t, f64::INFINITY).unwrap();
        prop_assert!((est - mine).abs() < 1e-12);
    }

    #[test]
    fn top_k_bagging_keeps_the_best_epochs(aucs in prop::collection::vec(prop::option::of(0u8..10), 1..12), k in 1usize..5) {
        let mut r = rng(3);
        let config = MilConfig::new(AggregatorKind::Mean, 2, 2);
        let candidates: Vec<(usize, Option<f64>, MilParams)> = aucs
            .iter()
            .enumerate()
            .map(|(e, a)| (e, a.map(|v| v as f64 / 10.0), MilParams::init(config.clone(), &mut r).unwrap()))
            .collect();
        // oracle: order by AUC (undefined last), later epoch first on ties
        let mut expected: Vec<(usize, Option<f64>)> = candidates.iter().map(|c| (c.0, c.1)).collect();
        expected.sort_by(|a, b| {
            let key = |x: Option<f64>| x.map_or(-1.0, |v| v);
            key(b.1).partial_cmp(&key(a.1)).unwrap().then(b.0.cmp(&a.0))
        });
        expected.truncate(k);
        let ensemble = bag_models(candidates, k);
        let got: Vec<usize> = ensemble.epochs.clone();
        let want: Vec<usize> = expected.iter().map(|e| e.0).collect();
        prop_assert_eq!(got, want);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kfold_has_no_leakage_and_keeps_strata(seed in 0u64..1000, sizes in prop::collection::vec(20usize..40, 2..4)) {
        let data = generate(&SynthConfig {
            cohorts: sizes.len(),
            patients_per_cohort: sizes.clone(),
            instance: InstanceKind::Features { d: 2 },
            tiles_per_slide: [2, 3],
            seed,
            ..Default::default()
        })
        .unwrap();
        let folds = match stratified_patient_kfold(&data, 5, seed) {
            Ok(f) => f,
            // a stratum smaller than the fold count is rejected up front
            Err(_) => return Ok(()),
        };
        let all_patients: BTreeSet<_> = data.patients().keys().cloned().collect();
        let mut tested = BTreeSet::new();
        let strata = |patients: &BTreeSet<(usize, String)>| {
            let mut count: BTreeMap<(usize, usize), usize> = BTreeMap::new();
            for p in patients {
                *count.entry((p.0, data.patients()[p])).or_default() += 1;
            }
            count
        };
        let global = strata(&all_patients);
        for fold in &folds {
            let train = Fold::patients(&data, &fold.train);
            let val = Fold::patients(&data, &fold.val);
            let test = Fold::patients(&data, &fold.test);
            prop_assert!(train.is_disjoint(&val));
            prop_assert!(train.is_disjoint(&test));
            prop_assert!(val.is_disjoint(&test));
            let union: BTreeSet<_> = train.union(&val).chain(test.iter()).cloned().collect();
            prop_assert_eq!(&union, &all_patients);
            prop_assert!(tested.is_disjoint(&test));
            tested.extend(test.iter().cloned());
            let local = strata(&test);
            for (key, &n) in &global {
                let expected = n as f64 / folds.len() as f64;
                let got = *local.get(key).unwrap_or(&0) as f64;
                prop_assert!((got - expected).abs() <= 1.0, "stratum {key:?}: {got} vs {expected}");
            }
        }
        prop_assert_eq!(tested, all_patients);
    }
}
