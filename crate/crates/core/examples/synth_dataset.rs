//! Generates a synthetic multi-cohort dataset, writes it as a JSONL manifest
//! with a binary sidecar, reads it back and builds patient-stratified folds.
//!
//! ```text
//! cargo run --release --example synth_dataset -- [out_dir]
//! ```

use std::path::PathBuf;

use cohort_mil::dataset::{generate, read_dataset, sidecar_path, stratified_patient_kfold, Fold, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(std::env::temp_dir);
    let config = SynthConfig {
        bias_strength: 0.4,
        seed: 21,
        ..Default::default()
    };
    let data = generate(&config)?;
    print!("{}", data.summary());

    let manifest = dir.join("synth_example.jsonl");
    cohort_mil::dataset::write_dataset(&data, &manifest)?;
    let back = read_dataset(&manifest)?;
    println!(
        "wrote {} and {}; round trip equal: {}",
        manifest.display(),
        sidecar_path(&manifest).display(),
        back == data
    );

    for (i, fold) in stratified_patient_kfold(&data, 5, 0)?.iter().enumerate() {
        let train = Fold::patients(&data, &fold.train);
        let test = Fold::patients(&data, &fold.test);
        println!(
            "fold {i}: train={} val={} test={} slides, shared patients={}",
            fold.train.len(),
            fold.val.len(),
            fold.test.len(),
            train.intersection(&test).count()
        );
    }
    Ok(())
}
