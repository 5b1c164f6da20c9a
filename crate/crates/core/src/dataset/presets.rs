//! Ready-made synthetic tasks used by the examples and the acceptance runs.

use super::{InstanceKind, SynthConfig};

/// Features whose class share swings from 20% to 80% across three cohorts,
/// with a cohort style on every instance. A model can score well on this
/// task by recognizing the cohort instead of the class motif.
pub fn biased_task(seed: u64) -> SynthConfig {
    SynthConfig {
        cohorts: 3,
        classes: 2,
        patients_per_cohort: vec![60, 50, 60],
        slides_per_patient: [1, 1],
        tiles_per_slide: [12, 20],
        instance: InstanceKind::Features { d: 16 },
        shared_strength: 0.6,
        cohort_strength: 0.0,
        style_strength: 0.5,
        class_priors: Some(vec![vec![0.8, 0.2], vec![0.5, 0.5], vec![0.2, 0.8]]),
        witness_fraction: 0.2,
        noise_std: 1.0,
        seed,
        motif_seed: 1000 + seed,
        ..Default::default()
    }
}

/// The same task with balanced classes in every cohort and fresh patients;
/// cohort shortcuts learned on `task` do not help here.
pub fn unbiased_counterpart(task: &SynthConfig) -> SynthConfig {
    SynthConfig {
        class_priors: Some(vec![vec![0.5, 0.5]; task.cohorts]),
        bias_strength: 0.0,
        patients_per_cohort: vec![100; task.cohorts],
        seed: 500 + task.seed,
        ..task.clone()
    }
}

/// Small tiles where the positive witness of cohort `c` is the decoy of
/// cohort `c + 1` and no cohort style is present, so a tile's meaning depends
/// on a cohort it does not reveal.
pub fn decoy_task(seed: u64) -> SynthConfig {
    SynthConfig {
        cohorts: 3,
        classes: 2,
        patients_per_cohort: vec![30, 30, 30],
        slides_per_patient: [1, 1],
        tiles_per_slide: [8, 12],
        instance: InstanceKind::Tiles { channels: 1, side: 8 },
        shared_strength: 0.0,
        cohort_strength: 1.5,
        style_strength: 0.0,
        decoy_strength: 1.5,
        witness_fraction: 0.3,
        noise_std: 1.0,
        seed,
        motif_seed: 2000 + seed,
        ..Default::default()
    }
}
