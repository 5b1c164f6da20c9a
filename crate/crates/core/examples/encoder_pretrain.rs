//! Pretrains the cohort-aware tile encoder on proxy tile labels from a small
//! synthetic tile dataset, then encodes a few tiles.
//!
//! ```text
//! cargo run --release --example encoder_pretrain -- [epochs]
//! ```

use cohort_mil::balancing::{pretrain_weights, SlideTiles};
use cohort_mil::cavit::{encode_tile, patchify, pretrain_encoder, EncoderParams, PretrainConfig, PretrainSample, TileImage};
use cohort_mil::cohort_attention::{CohortId, QueryMode};
use cohort_mil::dataset::{generate, InstanceKind, SynthConfig};
use cohort_mil::diffcore::{AdamConfig, Tensor};
use cohort_mil::trainer::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(3);
    let side = 16;
    let data = generate(&SynthConfig {
        patients_per_cohort: vec![12, 10, 8],
        instance: InstanceKind::Tiles { channels: 1, side },
        seed: 3,
        ..Default::default()
    })?;
    let config = TrainConfig::default().encoder_config(1, side, data.cohorts);
    let init = EncoderParams::init(config, QueryMode::CohortAware, 11)?;

    let tiles: Vec<SlideTiles> = data
        .slides
        .iter()
        .map(|s| SlideTiles {
            cohort: s.cohort,
            slide_id: s.slide_id.clone(),
            tiles: s.len(),
        })
        .collect();
    let weights = pretrain_weights(&tiles)?;
    let mut samples = Vec::new();
    for (slide, w) in data.slides.iter().zip(weights) {
        for t in 0..slide.len() {
            let pixels = Tensor::new(vec![1, side, side], slide.instances.row(t).to_vec()).expect("tile shape");
            samples.push(PretrainSample {
                patches: patchify(&pixels, &config)?,
                cohort: CohortId(slide.cohort),
                label: slide.tile_labels[t],
                weight: w,
            });
        }
    }
    println!("tiles={} witness_tiles={}", samples.len(), samples.iter().filter(|s| s.label > 0).count());

    let out = pretrain_encoder(
        &samples,
        init,
        &PretrainConfig {
            epochs,
            adam: AdamConfig { lr: 1e-3, ..Default::default() },
            seed: 5,
            ..Default::default()
        },
    )?;
    for (e, l) in out.loss_curve.iter().enumerate() {
        println!("epoch={e} weighted_loss={l:.4}");
    }

    let slide = &data.slides[0];
    let tile = TileImage {
        pixels: Tensor::new(vec![1, side, side], slide.instances.row(0).to_vec()).expect("tile shape"),
        cohort: CohortId(slide.cohort),
    };
    let feature = encode_tile(&tile, &out.encoder)?;
    let head: Vec<String> = feature.iter().take(6).map(|v| format!("{v:.3}")).collect();
    println!("feature of {} tile 0 (first 6 of {}): [{}]", slide.slide_id, feature.len(), head.join(", "));
    Ok(())
}
