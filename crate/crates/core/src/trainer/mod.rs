//! Adversarial cohort-regularized MIL training, evaluation and model bagging.

mod checkpoint;
mod ensemble;
pub mod metrics;
mod pipeline;
mod probe;
mod report;
mod step;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balancing::BalanceError;
use crate::cavit::CaVitConfig;
use crate::dataset::DatasetError;
use crate::error::ModelError;
use crate::mi_adversary::{CriticObjective, MiSign};
use crate::mil::AggregatorKind;

pub use checkpoint::{Checkpoint, Manifest, TensorEntry, MAGIC};
pub use ensemble::{bag_models, Ensemble};
pub use pipeline::{
    assign_weights, encode_dataset, load_fold_model, pretrain_for_fold, run_cv, run_fold, save_fold_model, train_mil, write_fold, CvOutcome,
    FoldModel, FoldOutcome, TrainOutcome,
};
pub use probe::{cohort_probe, LogisticModel, ProbeConfig};
pub use report::{aggregate, evaluate, AggregateReport, EpochLog, MeanStd, MetricsReport};
pub use step::{train_step, LossRecord};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("cohort probe needs at least two cohorts")]
    SingleCohort,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("artifact mismatch: {0}")]
    Mismatch(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Balance(#[from] BalanceError),
}

impl TrainError {
    /// True for failures caused by numeric blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        match self {
            TrainError::NonFinite(_) => true,
            TrainError::Model(ModelError::NonFinite(_)) => true,
            TrainError::Model(ModelError::Graph(g)) => {
                matches!(g, crate::diffcore::GraphError::NonFinite { .. })
            }
            _ => false,
        }
    }
}

/// How tile features are obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderMode {
    /// Cohort-aware encoder pretrained per fold.
    #[default]
    Cavit,
    /// Same encoder with the dataset query only (α_d ≡ 1).
    PlainVit,
    /// Instances already are features.
    Precomputed,
}

impl std::str::FromStr for EncoderMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cavit" => Ok(Self::Cavit),
            "plain-vit" => Ok(Self::PlainVit),
            "precomputed" => Ok(Self::Precomputed),
            other => Err(format!("unknown encoder mode `{other}` (cavit, plain-vit, precomputed)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub tau: f64,
    pub mil_lr: f64,
    pub adversary_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub aggregator: AggregatorKind,
    pub encoder_mode: EncoderMode,
    pub seed: u64,
    pub folds: usize,
    /// Bags larger than this are subsampled each epoch.
    pub n_max: usize,
    pub mil_heads: usize,
    pub mi_hidden: usize,
    pub mi_sign: MiSign,
    pub mi_critic: CriticObjective,
    /// Adversary ascent steps per mini-batch.
    pub adversary_steps: usize,
    /// When false the score network is never built or updated.
    pub adversary: bool,
    /// Hierarchical sample weights; uniform weights when false.
    pub balance: bool,
    /// Checkpoints kept for the bagged ensemble.
    pub top_k: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub mlp_ratio: usize,
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            tau: 5.0,
            mil_lr: 1e-3,
            adversary_lr: 1e-3,
            epochs: 20,
            batch_size: 16,
            aggregator: AggregatorKind::Mha,
            encoder_mode: EncoderMode::Cavit,
            seed: 0,
            folds: 5,
            n_max: 64,
            mil_heads: 4,
            mi_hidden: 64,
            mi_sign: MiSign::Minimize,
            mi_critic: CriticObjective::JensenShannon,
            adversary_steps: 1,
            adversary: true,
            balance: true,
            top_k: 3,
            embed_dim: 32,
            depth: 2,
            heads: 4,
            patch_size: 4,
            mlp_ratio: 4,
            pretrain_epochs: 3,
            pretrain_batch: 32,
            pretrain_lr: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return err(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.lambda > 0.0 && !self.adversary {
            return err("lambda > 0 needs the adversary enabled".into());
        }
        if self.lambda > 0.0 && self.batch_size < 2 {
            return err("batch size must be at least 2 when lambda > 0".into());
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return err("batch_size and epochs must be positive".into());
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return err(format!("tau must be positive, got {}", self.tau));
        }
        for (name, v) in [
            ("mil_lr", self.mil_lr),
            ("adversary_lr", self.adversary_lr),
            ("pretrain_lr", self.pretrain_lr),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return err(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.folds < 2 {
            return err(format!("need at least 2 folds, got {}", self.folds));
        }
        if self.top_k == 0 {
            return err("top_k must be positive".into());
        }
        if self.adversary_steps == 0 {
            return err("adversary_steps must be positive".into());
        }
        if self.mi_hidden == 0 {
            return err("mi_hidden must be positive".into());
        }
        if self.encoder_mode != EncoderMode::Precomputed && self.pretrain_batch == 0 {
            return err("pretrain_batch must be positive".into());
        }
        Ok(())
    }

    /// Encoder geometry for tiles of the given shape.
    pub fn encoder_config(&self, channels: usize, side: usize, cohorts: usize) -> CaVitConfig {
        CaVitConfig {
            channels,
            side,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            cohorts,
        }
    }
}
