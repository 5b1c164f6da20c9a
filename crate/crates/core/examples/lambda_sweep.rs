//! Trains on a cohort-biased synthetic dataset for several adversary weights
//! and reports, per weight: task AUC on the held-out fold, generalization AUC
//! on an unbiased dataset with the same motifs, and the cohort-probe AUC of
//! the slide representations on that unbiased set.
//!
//! ```text
//! cargo run --release --example lambda_sweep -- [seeds] [lambdas] [adversary_steps]
//! cargo run --release --example lambda_sweep -- 5 0,0.25,0.5,1 5
//! ```

use cohort_mil::dataset::presets::{biased_task, unbiased_counterpart};
use cohort_mil::dataset::{generate, stratified_patient_kfold};
use cohort_mil::mil::AggregatorKind;
use cohort_mil::trainer::{run_fold, EncoderMode, TrainConfig};

/// MHA aggregator on precomputed features; the critic takes several ascent
/// steps per batch so it keeps up with the encoder it is judging.
pub fn sweep_config(lambda: f64, seed: u64, adversary_steps: usize) -> TrainConfig {
    TrainConfig {
        lambda,
        encoder_mode: EncoderMode::Precomputed,
        aggregator: AggregatorKind::Mha,
        epochs: 150,
        batch_size: 32,
        mil_lr: 3e-3,
        adversary_lr: 1e-2,
        adversary_steps,
        seed,
        ..Default::default()
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(2);
    let lambdas: Vec<f64> = match args.next() {
        Some(s) => s.split(',').map(str::parse).collect::<Result<_, _>>()?,
        None => vec![0.0, 0.25, 0.5, 1.0],
    };
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5);
    println!("seed\tlambda\ttask_auc\tgeneral_auc\tprobe_auc");
    for seed in 0..seeds {
        let task = biased_task(seed);
        let data = generate(&task)?;
        let unbiased = generate(&unbiased_counterpart(&task))?;
        let split = &stratified_patient_kfold(&data, 5, seed)?[0];
        for &lambda in &lambdas {
            let fold = run_fold(&data, split, 0, &sweep_config(lambda, seed, steps))?;
            let general = fold.model.evaluate(&unbiased, Some(&fold.model.probe_config()))?;
            let fmt = |v: Option<f64>| v.map_or("undefined".into(), |x| format!("{x:.4}"));
            println!(
                "{seed}\t{lambda}\t{}\t{}\t{}",
                fmt(fold.report.overall.auc),
                fmt(general.overall.auc),
                fmt(general.probe_auc)
            );
        }
    }
    Ok(())
}
