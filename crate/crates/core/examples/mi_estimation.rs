//! Trains the score network on correlated Gaussians and compares the
//! clipped estimate with the closed-form mutual information.
//!
//! ```text
//! cargo run --release --example mi_estimation -- [rho] [steps] [batch]
//! ```

use std::time::Instant;

use cohort_mil::diffcore::AdamConfig;
use cohort_mil::mi_adversary::{MiConfig, MiEstimator};
use cohort_mil::verify::{gaussian_pairs, mean_estimate};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let rho: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.8);
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1500);
    let batch: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(64);
    let truth = -0.5 * (1.0 - rho * rho).ln();
    let (z, c) = gaussian_pairs(rho, 10_000, 1);

    let config = MiConfig {
        hidden: 64,
        tau: 5.0,
        adam: AdamConfig { lr: 5e-3, ..Default::default() },
        ..Default::default()
    };
    let mut est = MiEstimator::init(1, 1, config, 2)?;
    let start = Instant::now();
    let curve = est.fit(&z, &c, steps, batch, 3)?;
    let elapsed = start.elapsed();
    for (i, v) in curve.iter().enumerate().step_by((steps / 10).max(1)) {
        println!("step={i} batch_estimate={v:.4}");
    }
    let smile = mean_estimate(&est, &z, &c, 128, 40, 4)?;
    println!("rho={rho} truth={truth:.4} smile={smile:.4} error={:.4}", smile - truth);
    println!("train_seconds={:.2} ms_per_step={:.2}", elapsed.as_secs_f64(), elapsed.as_secs_f64() * 1e3 / steps as f64);
    Ok(())
}
