//! Cohort-aware versus plain tile encoder on a task whose tile signal means
//! different things in different cohorts.
//!
//! Positive slides of cohort `c` carry the pattern `P_c`; negative slides of
//! cohort `c` carry the decoy `P_{c+1}`. There is no cohort style, so a tile
//! alone does not reveal its cohort and only an encoder that is told the
//! cohort can separate witnesses from decoys.
//!
//! ```text
//! cargo run --release --example encoder_ablation -- [seeds] [pretrain_epochs]
//! ```

use cohort_mil::dataset::presets::decoy_task;
use cohort_mil::dataset::{generate, stratified_patient_kfold};
use cohort_mil::mil::AggregatorKind;
use cohort_mil::trainer::{run_fold, EncoderMode, TrainConfig};

/// Encoder and MIL settings shared by both arms; only the query mode differs.
pub fn ablation_config(mode: EncoderMode, seed: u64, pretrain_epochs: usize) -> TrainConfig {
    TrainConfig {
        encoder_mode: mode,
        aggregator: AggregatorKind::Abmil,
        lambda: 0.0,
        adversary: false,
        embed_dim: 16,
        depth: 1,
        heads: 2,
        patch_size: 4,
        mlp_ratio: 2,
        pretrain_epochs,
        pretrain_lr: 3e-3,
        epochs: 40,
        mil_lr: 3e-3,
        seed,
        ..Default::default()
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(2);
    let pretrain_epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5);
    println!("seed\tcavit_auc\tplain_vit_auc");
    let (mut sum_c, mut sum_p) = (0.0, 0.0);
    for seed in 0..seeds {
        let data = generate(&decoy_task(seed))?;
        let split = &stratified_patient_kfold(&data, 5, seed)?[0];
        let auc = |mode| -> Result<f64, Box<dyn std::error::Error>> {
            let fold = run_fold(&data, split, 0, &ablation_config(mode, seed, pretrain_epochs))?;
            Ok(fold.report.overall.auc.unwrap_or(0.5))
        };
        let cavit = auc(EncoderMode::Cavit)?;
        let plain = auc(EncoderMode::PlainVit)?;
        sum_c += cavit;
        sum_p += plain;
        println!("{seed}\t{cavit:.4}\t{plain:.4}");
    }
    let n = seeds.max(1) as f64;
    println!("mean\t{:.4}\t{:.4}", sum_c / n, sum_p / n);
    Ok(())
}
