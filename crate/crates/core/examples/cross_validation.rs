//! Full cross-validated run on precomputed features: adversarial training,
//! top-3 bagging, per-fold reports and the aggregate, written to disk.
//!
//! ```text
//! cargo run --release --example cross_validation -- [out_dir] [lambda]
//! ```

use std::path::PathBuf;

use cohort_mil::dataset::{generate, InstanceKind, SynthConfig};
use cohort_mil::trainer::{run_cv, EncoderMode, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("cohort_mil_cv"));
    let lambda: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1.0);

    let data = generate(&SynthConfig {
        instance: InstanceKind::Features { d: 16 },
        bias_strength: 0.5,
        seed: 4,
        ..Default::default()
    })?;
    let config = TrainConfig {
        lambda,
        encoder_mode: EncoderMode::Precomputed,
        epochs: 30,
        mil_lr: 3e-3,
        seed: 9,
        ..Default::default()
    };
    std::fs::create_dir_all(&out)?;
    let cv = run_cv(&data, &config, Some(&out))?;
    for f in &cv.folds {
        println!(
            "fold {}: test auc={:?} probe auc={:?} epochs kept={:?}",
            f.fold, f.report.overall.auc, f.report.probe_auc, f.model.ensemble.epochs
        );
    }
    print!("{}", cv.aggregate.to_text());
    println!("artifacts in {}", out.display());
    Ok(())
}
