//! Runs the four MIL aggregators on the same bag and prints the slide
//! representation width and class probabilities of each.
//!
//! ```text
//! cargo run --release --example mil_aggregators
//! ```

use cohort_mil::init::{rng, uniform};
use cohort_mil::mil::{aggregate, predict_bag, AggregatorKind, MilConfig, MilParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut r = rng(1);
    let bag = uniform(&mut r, &[12, 16], 1.0);
    for kind in [AggregatorKind::Mean, AggregatorKind::Max, AggregatorKind::Abmil, AggregatorKind::Mha] {
        let config = MilConfig {
            heads: 4,
            ..MilConfig::new(kind, 16, 2)
        };
        let params = MilParams::init(config, &mut rng(2))?;
        let z = aggregate(&bag, &params)?;
        let p = predict_bag(&bag, &params)?;
        println!(
            "{kind:?}: parameters={} z_width={} p=[{:.4}, {:.4}]",
            params.store.iter().map(|(_, t)| t.len()).sum::<usize>(),
            z.len(),
            p[0],
            p[1]
        );
    }
    Ok(())
}
