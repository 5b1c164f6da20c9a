//! Fold-level training: encoder pretraining, feature extraction, the
//! adversarial MIL loop with per-epoch validation, bagging, evaluation and
//! the on-disk layout of a cross-validation run.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::checkpoint::Checkpoint;
use super::ensemble::{bag_models, Ensemble};
use super::probe::ProbeConfig;
use super::report::{aggregate, evaluate, AggregateReport, EpochLog, MetricsReport};
use super::step::train_step;
use super::{EncoderMode, TrainConfig, TrainError};
use crate::balancing::{clip_weights, mil_weights, pretrain_weights, SlideLabel, SlideTiles};
use crate::cavit::{patchify, pretrain_encoder, EncoderParams, PretrainConfig, PretrainSample, TileEncoder};
use crate::cohort_attention::{CohortId, QueryMode};
use crate::diffcore::{Adam, AdamConfig, ParamStore, Tensor};
use crate::dataset::{stratified_patient_kfold, Dataset, Fold, InstanceKind, Slide};
use crate::init::{derive_seed, rng};
use crate::mi_adversary::{MiConfig, MiEstimator};
use crate::mil::{subsample_rows, Bag, MilConfig, MilParams};

// independent random streams derived from one seed
const STREAM_MIL_INIT: u64 = 1;
const STREAM_ADVERSARY: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_SUBSAMPLE: u64 = 4;
const STREAM_ENCODER: u64 = 5;
const STREAM_PRETRAIN: u64 = 6;
const STREAM_PROBE: u64 = 7;
const STREAM_FOLD: u64 = 100;

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub ensemble: Ensemble,
    pub adversary: Option<MiEstimator>,
    pub log: Vec<EpochLog>,
    /// Parameters after the last epoch.
    pub last: MilParams,
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| t.row(i).to_vec()).collect();
    Tensor::from_rows(&rows)
}

/// Replaces bag weights with clipped hierarchical MIL weights, or unit
/// weights when balancing is off.
pub fn assign_weights(bags: &mut [Bag], balance: bool) -> Result<(), TrainError> {
    if !balance {
        for b in bags.iter_mut() {
            b.weight = 1.0;
        }
        return Ok(());
    }
    let labels: Vec<SlideLabel> = bags
        .iter()
        .map(|b| SlideLabel {
            cohort: b.cohort.0,
            slide_id: b.slide_id.clone(),
            label: b.label,
        })
        .collect();
    let raw = mil_weights(&labels)?;
    let w = if raw.len() >= 2 { clip_weights(&raw)? } else { raw };
    for (b, w) in bags.iter_mut().zip(w) {
        b.weight = w;
    }
    Ok(())
}

/// Trains one MIL model (and its adversary) on `train`, validating on `val`
/// after every epoch, and bags the `top_k` best epochs.
///
/// Bag weights are taken as given; see [`assign_weights`].
pub fn train_mil(
    train: &[Bag],
    val: &[Bag],
    classes: usize,
    cohorts: usize,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let first = train.first().ok_or_else(|| TrainError::Data("training set is empty".into()))?;
    let d = first.features.cols();
    if let Some(b) = train.iter().chain(val).find(|b| b.features.cols() != d) {
        return Err(TrainError::Data(format!("bag {} has feature width {}, expected {d}", b.slide_id, b.features.cols())));
    }
    let mil_config = MilConfig {
        heads: config.mil_heads,
        ..MilConfig::new(config.aggregator, d, classes)
    };
    let mut model = MilParams::init(mil_config, &mut rng(derive_seed(config.seed, STREAM_MIL_INIT)))?;
    let mut opt = Adam::new(AdamConfig {
        lr: config.mil_lr,
        ..Default::default()
    });
    let mut adversary = if config.adversary && cohorts >= 2 {
        let mi = MiConfig {
            hidden: config.mi_hidden,
            tau: config.tau,
            adam: AdamConfig {
                lr: config.adversary_lr,
                ..Default::default()
            },
            sign: config.mi_sign,
            critic: config.mi_critic,
            ascent_steps: config.adversary_steps,
        };
        Some(MiEstimator::init(d, cohorts, mi, derive_seed(config.seed, STREAM_ADVERSARY))?)
    } else {
        None
    };
    let mut shuffle_rng = rng(derive_seed(config.seed, STREAM_SHUFFLE));
    let mut sub_rng = rng(derive_seed(config.seed, STREAM_SUBSAMPLE));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut candidates = Vec::with_capacity(config.epochs);
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0; 4];
        let (mut mi_steps, mut adv_steps, mut steps, mut skipped) = (0usize, 0usize, 0usize, 0usize);
        for chunk in order.chunks(config.batch_size) {
            if chunk.iter().all(|&i| train[i].weight == 0.0) {
                skipped += 1;
                continue;
            }
            let batch: Vec<Bag> = chunk
                .iter()
                .map(|&i| {
                    let b = &train[i];
                    let idx = subsample_rows(b.features.rows(), config.n_max, &mut sub_rng);
                    Bag {
                        features: if idx.len() == b.features.rows() {
                            b.features.clone()
                        } else {
                            gather_rows(&b.features, &idx)
                        },
                        ..b.clone()
                    }
                })
                .collect();
            let rec = train_step(&mut model, &mut opt, adversary.as_mut(), &batch, config.lambda)?;
            sums[0] += rec.total;
            sums[1] += rec.mil;
            steps += 1;
            if let Some(mi) = rec.mi {
                sums[2] += mi;
                mi_steps += 1;
            }
            if let Some(a) = rec.adversary_estimate {
                sums[3] += a;
                adv_steps += 1;
            }
        }
        let val_auc = if val.is_empty() {
            None
        } else {
            evaluate(&Ensemble::single(model.clone()), val, classes, cohorts, None)?
                .overall
                .auc
        };
        let mean = |s: f64, n: usize| if n == 0 { None } else { Some(s / n as f64) };
        let entry = EpochLog {
            epoch,
            loss: mean(sums[0], steps).unwrap_or(0.0),
            mil_loss: mean(sums[1], steps).unwrap_or(0.0),
            mi_loss: mean(sums[2], mi_steps),
            adversary_estimate: mean(sums[3], adv_steps),
            val_auc,
            steps,
            skipped,
        };
        info!("event=epoch {}", entry.to_line());
        log.push(entry);
        candidates.push((epoch, val_auc, model.clone()));
    }
    Ok(TrainOutcome {
        ensemble: bag_models(candidates, config.top_k),
        adversary,
        log,
        last: model,
    })
}

fn tile_geometry(dataset: &Dataset) -> Result<(usize, usize), TrainError> {
    match dataset.kind {
        InstanceKind::Tiles { channels, side } => Ok((channels, side)),
        InstanceKind::Features { .. } => Err(TrainError::Config(
            "encoder modes cavit and plain-vit need a tile dataset; use encoder_mode=precomputed for features".into(),
        )),
    }
}

fn slide_patches(slide: &Slide, encoder: &EncoderParams) -> Result<Vec<Tensor>, TrainError> {
    let c = &encoder.config;
    (0..slide.len())
        .map(|t| {
            let pixels = Tensor::new(vec![c.channels, c.side, c.side], slide.instances.row(t).to_vec())
                .ok_or_else(|| TrainError::Data(format!("slide {} tile {t} has the wrong size", slide.slide_id)))?;
            Ok(patchify(&pixels, c)?)
        })
        .collect()
}

/// Pretrains a fresh tile encoder on proxy tile labels of the training
/// slides with hierarchical tile weights. `None` for precomputed features.
pub fn pretrain_for_fold(
    dataset: &Dataset,
    train_idx: &[usize],
    config: &TrainConfig,
) -> Result<Option<EncoderParams>, TrainError> {
    let mode = match config.encoder_mode {
        EncoderMode::Precomputed => {
            if !matches!(dataset.kind, InstanceKind::Features { .. }) {
                return Err(TrainError::Config("encoder_mode=precomputed needs a feature dataset".into()));
            }
            return Ok(None);
        }
        EncoderMode::Cavit => QueryMode::CohortAware,
        EncoderMode::PlainVit => QueryMode::DatasetOnly,
    };
    let (channels, side) = tile_geometry(dataset)?;
    let enc_config = config.encoder_config(channels, side, dataset.cohorts);
    let init = EncoderParams::init(enc_config, mode, derive_seed(config.seed, STREAM_ENCODER))?;
    if config.pretrain_epochs == 0 {
        return Ok(Some(init));
    }
    let slides: Vec<&Slide> = train_idx.iter().map(|&i| &dataset.slides[i]).collect();
    let tiles: Vec<SlideTiles> = slides
        .iter()
        .map(|s| SlideTiles {
            cohort: s.cohort,
            slide_id: s.slide_id.clone(),
            tiles: s.len(),
        })
        .collect();
    let weights = pretrain_weights(&tiles)?;
    let mut samples = Vec::new();
    for (s, w) in slides.iter().zip(weights) {
        for (t, patches) in slide_patches(s, &init)?.into_iter().enumerate() {
            samples.push(PretrainSample {
                patches,
                cohort: CohortId(s.cohort),
                label: s.tile_labels.get(t).copied().unwrap_or(0),
                weight: w,
            });
        }
    }
    let pc = PretrainConfig {
        epochs: config.pretrain_epochs,
        batch_size: config.pretrain_batch,
        adam: AdamConfig {
            lr: config.pretrain_lr,
            ..Default::default()
        },
        seed: derive_seed(config.seed, STREAM_PRETRAIN),
        num_labels: dataset.classes,
    };
    let out = pretrain_encoder(&samples, init, &pc)?;
    info!(
        "event=pretrain tiles={} final_loss={:.6}",
        samples.len(),
        out.loss_curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(Some(out.encoder))
}

/// Replaces tile instances by encoder features. Without an encoder the
/// dataset must already hold features and is returned unchanged.
pub fn encode_dataset(dataset: &Dataset, encoder: Option<&EncoderParams>) -> Result<Dataset, TrainError> {
    let Some(encoder) = encoder else {
        if !matches!(dataset.kind, InstanceKind::Features { .. }) {
            return Err(TrainError::Config("tile dataset needs an encoder".into()));
        }
        return Ok(dataset.clone());
    };
    tile_geometry(dataset)?;
    let mut enc = TileEncoder::new(encoder)?;
    let d = encoder.config.embed_dim;
    let mut slides = Vec::with_capacity(dataset.slides.len());
    for s in &dataset.slides {
        let mut rows = Vec::with_capacity(s.len());
        for p in slide_patches(s, encoder)? {
            rows.push(enc.encode_patches(&p, CohortId(s.cohort))?);
        }
        slides.push(Slide {
            instances: Tensor::from_rows(&rows),
            ..s.clone()
        });
    }
    Ok(Dataset {
        cohorts: dataset.cohorts,
        classes: dataset.classes,
        kind: InstanceKind::Features { d },
        slides,
    })
}

/// Everything needed to score new slides.
#[derive(Clone, Debug)]
pub struct FoldModel {
    pub config: TrainConfig,
    pub fold: usize,
    pub classes: usize,
    pub cohorts: usize,
    pub instance: InstanceKind,
    pub encoder: Option<EncoderParams>,
    pub ensemble: Ensemble,
    pub adversary: Option<MiEstimator>,
}

impl FoldModel {
    /// Probe settings used for this fold's stored report.
    pub fn probe_config(&self) -> ProbeConfig {
        let seed = derive_seed(self.config.seed, STREAM_FOLD + self.fold as u64);
        ProbeConfig {
            seed: derive_seed(seed, STREAM_PROBE),
            ..Default::default()
        }
    }

    /// Encodes (if needed) and converts a dataset to unit-weight bags.
    pub fn bags(&self, dataset: &Dataset) -> Result<Vec<Bag>, TrainError> {
        if dataset.kind != self.instance || dataset.classes != self.classes || dataset.cohorts > self.cohorts {
            return Err(TrainError::Mismatch(format!(
                "dataset ({:?}, {} classes, {} cohorts) does not fit model ({:?}, {} classes, {} cohorts)",
                dataset.kind, dataset.classes, dataset.cohorts, self.instance, self.classes, self.cohorts
            )));
        }
        Ok(encode_dataset(dataset, self.encoder.as_ref())?.bags()?)
    }

    pub fn evaluate(&self, dataset: &Dataset, probe: Option<&ProbeConfig>) -> Result<MetricsReport, TrainError> {
        let bags = self.bags(dataset)?;
        evaluate(&self.ensemble, &bags, self.classes, self.cohorts, probe)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelEcho {
    train: TrainConfig,
    fold: usize,
    classes: usize,
    cohorts: usize,
    instance: InstanceKind,
    mil: MilConfig,
    encoder: Option<(crate::cavit::CaVitConfig, QueryMode)>,
    adversary: Option<(usize, usize, MiConfig)>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn checkpoint_path(dir: &Path, rank: usize) -> PathBuf {
    dir.join(format!("model_{rank}.ckpt"))
}

/// Writes one checkpoint per ensemble member (`model_0.ckpt` is the best),
/// each holding encoder, MIL and adversary parameters.
pub fn save_fold_model(model: &FoldModel, dir: &Path) -> Result<(), TrainError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let echo = ModelEcho {
        train: model.config.clone(),
        fold: model.fold,
        classes: model.classes,
        cohorts: model.cohorts,
        instance: model.instance,
        mil: model.ensemble.best().config,
        encoder: model.encoder.as_ref().map(|e| (e.config, e.mode)),
        adversary: model.adversary.as_ref().map(|a| (a.d_z, a.d_c, a.config)),
    };
    let config = serde_json::to_value(&echo).expect("config serializes");
    for (rank, member) in model.ensemble.members.iter().enumerate() {
        let mut params = ParamStore::new();
        if let Some(e) = &model.encoder {
            params.absorb("encoder/", e.store.clone());
        }
        params.absorb("mil/", member.store.clone());
        if let Some(a) = &model.adversary {
            params.absorb("adversary/", a.store.clone());
        }
        let ckpt = Checkpoint {
            config: config.clone(),
            epoch: model.ensemble.epochs[rank],
            metrics: json!({ "val_auc": model.ensemble.val_auc[rank], "rank": rank }),
            params,
        };
        ckpt.save(&checkpoint_path(dir, rank))?;
    }
    Ok(())
}

/// Reads the checkpoints written by [`save_fold_model`].
pub fn load_fold_model(dir: &Path) -> Result<FoldModel, TrainError> {
    let mut ckpts = Vec::new();
    while checkpoint_path(dir, ckpts.len()).exists() {
        ckpts.push(Checkpoint::load(&checkpoint_path(dir, ckpts.len()))?);
    }
    let first = ckpts
        .first()
        .ok_or_else(|| TrainError::Mismatch(format!("no model_0.ckpt in {}", dir.display())))?;
    let echo: ModelEcho = serde_json::from_value(first.config.clone())
        .map_err(|e| TrainError::Mismatch(format!("checkpoint config: {e}")))?;
    if ckpts.iter().any(|c| c.config != first.config) {
        return Err(TrainError::Mismatch("ensemble members disagree on configuration".into()));
    }
    let encoder = echo.encoder.map(|(config, mode)| EncoderParams {
        config,
        mode,
        store: first.params.extract("encoder/"),
    });
    let adversary = echo.adversary.map(|(d_z, d_c, config)| MiEstimator {
        config,
        d_z,
        d_c,
        store: first.params.extract("adversary/"),
        adam: Adam::new(config.adam),
    });
    let mut ensemble = Ensemble {
        members: Vec::new(),
        val_auc: Vec::new(),
        epochs: Vec::new(),
    };
    for c in &ckpts {
        let member = MilParams {
            config: echo.mil,
            store: c.params.extract("mil/"),
        };
        let expected = MilParams::init(echo.mil, &mut rng(0))?;
        let names_match = expected.store.names().eq(member.store.names())
            && expected
                .store
                .iter()
                .zip(member.store.iter())
                .all(|(a, b)| a.1.shape() == b.1.shape());
        if !names_match {
            return Err(TrainError::Mismatch("MIL parameters do not match the stored configuration".into()));
        }
        ensemble.members.push(member);
        ensemble.val_auc.push(c.metrics.get("val_auc").and_then(|v| v.as_f64()));
        ensemble.epochs.push(c.epoch);
    }
    if let Some(e) = &encoder {
        let expected = EncoderParams::init(e.config, e.mode, 0)?;
        if !expected.store.names().eq(e.store.names()) {
            return Err(TrainError::Mismatch("encoder parameters do not match the stored configuration".into()));
        }
    }
    Ok(FoldModel {
        config: echo.train,
        fold: echo.fold,
        classes: echo.classes,
        cohorts: echo.cohorts,
        instance: echo.instance,
        encoder,
        ensemble,
        adversary,
    })
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    pub split: Fold,
    pub log: Vec<EpochLog>,
    pub report: MetricsReport,
    pub model: FoldModel,
}

/// Pretrains (if needed), trains and evaluates one fold. The test report
/// includes the cohort probe on the best member's representations.
pub fn run_fold(dataset: &Dataset, split: &Fold, fold: usize, config: &TrainConfig) -> Result<FoldOutcome, TrainError> {
    config.validate()?;
    dataset.validate()?;
    let cfg = TrainConfig {
        seed: derive_seed(config.seed, STREAM_FOLD + fold as u64),
        ..config.clone()
    };
    let encoder = pretrain_for_fold(dataset, &split.train, &cfg)?;
    let bags = encode_dataset(dataset, encoder.as_ref())?.bags()?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| bags[i].clone()).collect::<Vec<_>>();
    let mut train = pick(&split.train);
    assign_weights(&mut train, config.balance)?;
    let val = pick(&split.val);
    let test = pick(&split.test);
    let outcome = train_mil(&train, &val, dataset.classes, dataset.cohorts, &cfg)?;
    let model = FoldModel {
        config: config.clone(),
        fold,
        classes: dataset.classes,
        cohorts: dataset.cohorts,
        instance: dataset.kind,
        encoder,
        ensemble: outcome.ensemble,
        adversary: outcome.adversary,
    };
    let report = evaluate(&model.ensemble, &test, dataset.classes, dataset.cohorts, Some(&model.probe_config()))?;
    Ok(FoldOutcome {
        fold,
        split: split.clone(),
        log: outcome.log,
        report,
        model,
    })
}

#[derive(Clone, Debug)]
pub struct CvOutcome {
    pub folds: Vec<FoldOutcome>,
    pub aggregate: AggregateReport,
}

fn write_text(path: &Path, text: &str) -> Result<(), TrainError> {
    fs::write(path, text).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), TrainError> {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    write_text(path, &s)
}

/// Writes the artifacts of one fold under `dir`.
pub fn write_fold(outcome: &FoldOutcome, dataset: &Dataset, dir: &Path) -> Result<(), TrainError> {
    save_fold_model(&outcome.model, dir)?;
    write_json(&dir.join("report.json"), &outcome.report)?;
    write_text(&dir.join("report.txt"), &outcome.report.to_text())?;
    let log: String = outcome.log.iter().map(|e| e.to_line() + "\n").collect();
    write_text(&dir.join("train_log.txt"), &log)?;
    let ids = |idx: &[usize]| idx.iter().map(|&i| dataset.slides[i].slide_id.clone()).collect::<Vec<_>>();
    write_json(
        &dir.join("split.json"),
        &json!({
            "train": ids(&outcome.split.train),
            "val": ids(&outcome.split.val),
            "test": ids(&outcome.split.test),
        }),
    )
}

/// Patient-stratified k-fold cross-validation. With `out_dir`, each fold's
/// artifacts go to `fold_{i}/` and the aggregate to `aggregate.{json,txt}`.
pub fn run_cv(dataset: &Dataset, config: &TrainConfig, out_dir: Option<&Path>) -> Result<CvOutcome, TrainError> {
    config.validate()?;
    let splits = stratified_patient_kfold(dataset, config.folds, config.seed)?;
    let mut folds = Vec::with_capacity(splits.len());
    for (i, split) in splits.iter().enumerate() {
        info!(
            "event=fold_start fold={i} train={} val={} test={}",
            split.train.len(),
            split.val.len(),
            split.test.len()
        );
        let outcome = run_fold(dataset, split, i, config)?;
        info!(
            "event=fold_done fold={i} auc={:?} probe_auc={:?}",
            outcome.report.overall.auc, outcome.report.probe_auc
        );
        if let Some(dir) = out_dir {
            write_fold(&outcome, dataset, &dir.join(format!("fold_{i}")))?;
        }
        folds.push(outcome);
    }
    let reports: Vec<MetricsReport> = folds.iter().map(|f| f.report.clone()).collect();
    let aggregate = aggregate(&reports);
    if let Some(dir) = out_dir {
        write_json(&dir.join("aggregate.json"), &aggregate)?;
        write_text(&dir.join("aggregate.txt"), &aggregate.to_text())?;
    }
    Ok(CvOutcome { folds, aggregate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, SynthConfig};

    fn features_data(seed: u64) -> Dataset {
        generate(&SynthConfig {
            patients_per_cohort: vec![12, 10],
            cohorts: 2,
            instance: InstanceKind::Features { d: 8 },
            tiles_per_slide: [4, 6],
            shared_strength: 2.0,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn quick(mode: EncoderMode) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 8,
            folds: 2,
            aggregator: crate::mil::AggregatorKind::Abmil,
            encoder_mode: mode,
            mi_hidden: 8,
            embed_dim: 8,
            heads: 2,
            mil_heads: 2,
            depth: 1,
            pretrain_epochs: 1,
            ..Default::default()
        }
    }

    #[test]
    fn cv_is_deterministic_and_round_trips() {
        let data = features_data(1);
        let config = quick(EncoderMode::Precomputed);
        let dir = tempfile::tempdir().unwrap();
        let a = run_cv(&data, &config, Some(dir.path())).unwrap();
        let b = run_cv(&data, &config, None).unwrap();
        assert_eq!(
            serde_json::to_string(&a.aggregate).unwrap(),
            serde_json::to_string(&b.aggregate).unwrap()
        );
        assert!(dir.path().join("fold_1/model_2.ckpt").exists());
        let loaded = load_fold_model(&dir.path().join("fold_0")).unwrap();
        assert_eq!(loaded.ensemble, a.folds[0].model.ensemble);
        let test = data.subset(&a.folds[0].split.test);
        let report = loaded.evaluate(&test, Some(&loaded.probe_config())).unwrap();
        assert_eq!(report, a.folds[0].report);
    }

    #[test]
    fn zero_lambda_equals_no_adversary() {
        let data = features_data(2);
        let with = TrainConfig {
            lambda: 0.0,
            ..quick(EncoderMode::Precomputed)
        };
        let without = TrainConfig {
            adversary: false,
            ..with.clone()
        };
        let a = run_cv(&data, &with, None).unwrap();
        let b = run_cv(&data, &without, None).unwrap();
        assert_eq!(a.aggregate, b.aggregate);
    }

    #[test]
    fn tile_pipeline_runs() {
        let data = generate(&SynthConfig {
            patients_per_cohort: vec![6, 6],
            cohorts: 2,
            tiles_per_slide: [3, 4],
            slides_per_patient: [1, 1],
            ..Default::default()
        })
        .unwrap();
        let config = TrainConfig {
            epochs: 1,
            ..quick(EncoderMode::Cavit)
        };
        let splits = stratified_patient_kfold(&data, 2, 0).unwrap();
        let out = run_fold(&data, &splits[0], 0, &config).unwrap();
        assert_eq!(out.model.encoder.as_ref().unwrap().mode, QueryMode::CohortAware);
        let dir = tempfile::tempdir().unwrap();
        save_fold_model(&out.model, dir.path()).unwrap();
        let back = load_fold_model(dir.path()).unwrap();
        assert!(back.encoder.unwrap().store.bitwise_eq(&out.model.encoder.unwrap().store));
    }

    #[test]
    fn mode_and_data_mismatch() {
        let data = features_data(3);
        let splits = stratified_patient_kfold(&data, 2, 0).unwrap();
        assert!(matches!(
            run_fold(&data, &splits[0], 0, &quick(EncoderMode::Cavit)),
            Err(TrainError::Config(_))
        ));
    }

    #[test]
    fn balanced_weights_have_equal_combination_sums() {
        let data = features_data(4);
        let mut bags = data.bags().unwrap();
        assign_weights(&mut bags, false).unwrap();
        assert!(bags.iter().all(|b| b.weight == 1.0));
        assign_weights(&mut bags, true).unwrap();
        assert!(bags.iter().all(|b| b.weight >= 0.0));
    }
}
