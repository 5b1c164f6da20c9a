//! Multi-cohort slide datasets: in-memory types, the synthetic generator,
//! patient-level fold splitting and the on-disk format.

mod io;
pub mod presets;
mod split;
mod synth;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort_attention::CohortId;
use crate::diffcore::Tensor;
use crate::mil::Bag;

pub use io::{read_dataset, sidecar_path, write_dataset, Header, SlideRecord, FORMAT_VERSION};
pub use split::{stratified_patient_kfold, Fold};
pub use synth::{generate, Motifs, SynthConfig};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("stratum (cohort {cohort}, class {class}) has {patients} patients, need at least {folds}")]
    StratumTooSmall {
        cohort: usize,
        class: usize,
        patients: usize,
        folds: usize,
    },
    #[error("patient {patient} has slides with different labels")]
    MixedPatientLabel { patient: String },
    #[error("{path}:{line}: {detail}")]
    Parse { path: String, line: usize, detail: String },
    #[error("{path}: byte offset {offset}: {detail}")]
    Sidecar { path: String, offset: u64, detail: String },
    #[error("dataset validation failed: {0}")]
    Validation(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// What each instance row holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InstanceKind {
    /// Flattened `[channels, side, side]` tiles.
    Tiles { channels: usize, side: usize },
    /// Precomputed `d`-dimensional features.
    Features { d: usize },
}

impl InstanceKind {
    pub fn width(&self) -> usize {
        match *self {
            InstanceKind::Tiles { channels, side } => channels * side * side,
            InstanceKind::Features { d } => d,
        }
    }
}

/// One slide and its instances.
#[derive(Clone, Debug, PartialEq)]
pub struct Slide {
    pub slide_id: String,
    pub patient_id: String,
    pub cohort: usize,
    pub label: usize,
    /// `[n, kind.width()]`.
    pub instances: Tensor,
    /// Proxy label per instance: 0 for background, `y` for a class-`y`
    /// witness.
    pub tile_labels: Vec<usize>,
}

impl Slide {
    pub fn len(&self) -> usize {
        self.instances.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Key identifying the patient across the whole dataset.
    pub fn patient_key(&self) -> (usize, String) {
        (self.cohort, self.patient_id.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub cohorts: usize,
    pub classes: usize,
    pub kind: InstanceKind,
    pub slides: Vec<Slide>,
}

impl Dataset {
    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let width = self.kind.width();
        let mut labels = std::collections::BTreeMap::new();
        for s in &self.slides {
            let bad = |msg: String| Err(DatasetError::Validation(format!("slide {}: {msg}", s.slide_id)));
            if s.cohort >= self.cohorts {
                return bad(format!("cohort {} >= {}", s.cohort, self.cohorts));
            }
            if s.label >= self.classes {
                return bad(format!("label {} >= {}", s.label, self.classes));
            }
            if s.is_empty() {
                return bad("no instances".into());
            }
            if s.instances.cols() != width {
                return bad(format!("instance width {} != {width}", s.instances.cols()));
            }
            if s.tile_labels.len() != s.len() {
                return bad("tile label count differs from instance count".into());
            }
            if let Some(&l) = s.tile_labels.iter().find(|&&l| l >= self.classes) {
                return bad(format!("tile label {l} >= {}", self.classes));
            }
            match labels.insert(s.patient_key(), s.label) {
                Some(prev) if prev != s.label => {
                    return Err(DatasetError::MixedPatientLabel {
                        patient: s.patient_id.clone(),
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn total_instances(&self) -> usize {
        self.slides.iter().map(Slide::len).sum()
    }

    /// Distinct patients as `(cohort, patient_id) -> label`.
    pub fn patients(&self) -> std::collections::BTreeMap<(usize, String), usize> {
        self.slides.iter().map(|s| (s.patient_key(), s.label)).collect()
    }

    /// `counts[cohort][class]` of slides.
    pub fn slide_counts(&self) -> Vec<Vec<usize>> {
        let mut c = vec![vec![0; self.classes]; self.cohorts];
        for s in &self.slides {
            c[s.cohort][s.label] += 1;
        }
        c
    }

    /// Subset of slides by index.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            slides: idx.iter().map(|&i| self.slides[i].clone()).collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            cohorts: self.cohorts,
            classes: self.classes,
            kind: self.kind,
            slides: Vec::new(),
        }
    }

    /// Feature-kind slides as MIL bags with unit weight.
    pub fn bags(&self) -> Result<Vec<Bag>, DatasetError> {
        if !matches!(self.kind, InstanceKind::Features { .. }) {
            return Err(DatasetError::Validation("tile datasets must be encoded before MIL".into()));
        }
        Ok(self
            .slides
            .iter()
            .map(|s| Bag {
                slide_id: s.slide_id.clone(),
                patient_id: s.patient_id.clone(),
                cohort: CohortId(s.cohort),
                label: s.label,
                features: s.instances.clone(),
                weight: 1.0,
            })
            .collect())
    }

    /// Counts table: one row per cohort, slides per class plus patients.
    pub fn summary(&self) -> String {
        use std::fmt::Write as _;
        let counts = self.slide_counts();
        let mut patients = vec![0usize; self.cohorts];
        for (c, _) in self.patients().keys() {
            patients[*c] += 1;
        }
        let mut out = String::from("cohort");
        for y in 0..self.classes {
            let _ = write!(out, "\tclass_{y}");
        }
        out.push_str("\tslides\tpatients\n");
        for (c, row) in counts.iter().enumerate() {
            let _ = write!(out, "{c}");
            for n in row {
                let _ = write!(out, "\t{n}");
            }
            let _ = writeln!(out, "\t{}\t{}", row.iter().sum::<usize>(), patients[c]);
        }
        out
    }
}
