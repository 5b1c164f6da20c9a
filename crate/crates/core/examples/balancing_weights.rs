//! Hierarchical sample weights for an imbalanced multi-cohort set, the 2σ
//! clip, and per-batch renormalization.
//!
//! ```text
//! cargo run --release --example balancing_weights
//! ```

use cohort_mil::balancing::{batch_renormalize, clip_bounds, clip_weights, mil_weights, weight_table, SlideLabel};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // cohort 0 is large and mostly class 0; cohort 1 is small and balanced
    let mut slides = Vec::new();
    for i in 0..12 {
        slides.push(SlideLabel {
            cohort: 0,
            label: usize::from(i >= 10),
            slide_id: format!("a{i}"),
        });
    }
    for i in 0..4 {
        slides.push(SlideLabel {
            cohort: 1,
            label: i % 2,
            slide_id: format!("b{i}"),
        });
    }
    let raw = mil_weights(&slides)?;
    let clipped = clip_weights(&raw)?;
    let (lo, hi) = clip_bounds(&raw)?;
    let ids: Vec<String> = slides.iter().map(|s| s.slide_id.clone()).collect();
    print!("{}", weight_table(&ids, &raw, &clipped));
    println!("clip_bounds=[{lo:.4}, {hi:.4}] sum_raw={:.6}", raw.iter().sum::<f64>());

    let batch = batch_renormalize(&clipped[8..14])?;
    println!(
        "batch weights: {:?} mean={:.6}",
        batch.iter().map(|w| format!("{w:.3}")).collect::<Vec<_>>(),
        batch.iter().sum::<f64>() / batch.len() as f64
    );
    Ok(())
}
