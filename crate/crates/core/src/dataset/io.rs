//! Dataset files: a JSON-lines manifest plus a binary sidecar.
//!
//! Line 1 of the manifest is a [`Header`]; every further line is one
//! [`SlideRecord`]. Instance values live in the sidecar as little-endian
//! `f32`, row-major, at `offset..offset + len` bytes for each slide.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetError, InstanceKind, Slide};
use crate::diffcore::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const FORMAT_NAME: &str = "cohort-mil-dataset";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub cohorts: usize,
    pub classes: usize,
    pub instance: InstanceKind,
    pub slides: usize,
    pub instances: usize,
    /// Sidecar file name, relative to the manifest.
    pub sidecar: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideRecord {
    pub slide_id: String,
    pub patient_id: String,
    pub cohort: usize,
    pub label: usize,
    pub n_instances: usize,
    /// Byte offset into the sidecar.
    pub offset: u64,
    /// Byte length in the sidecar.
    pub len: u64,
    pub tile_labels: Vec<usize>,
}

/// Sidecar path for a manifest: same stem, `.bin` extension.
pub fn sidecar_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `dataset` to `manifest` and its sidecar.
pub fn write_dataset(dataset: &Dataset, manifest: &Path) -> Result<(), DatasetError> {
    dataset.validate()?;
    let sidecar = sidecar_path(manifest);
    let sidecar_name = sidecar
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| DatasetError::Validation(format!("bad manifest path {}", manifest.display())))?;
    let header = Header {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        cohorts: dataset.cohorts,
        classes: dataset.classes,
        instance: dataset.kind,
        slides: dataset.slides.len(),
        instances: dataset.total_instances(),
        sidecar: sidecar_name,
    };
    let mut text = serde_json::to_string(&header).expect("header serializes");
    text.push('\n');
    let mut bytes = Vec::with_capacity(dataset.total_instances() * dataset.kind.width() * 4);
    for s in &dataset.slides {
        let offset = bytes.len() as u64;
        for &v in s.instances.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let record = SlideRecord {
            slide_id: s.slide_id.clone(),
            patient_id: s.patient_id.clone(),
            cohort: s.cohort,
            label: s.label,
            n_instances: s.len(),
            offset,
            len: bytes.len() as u64 - offset,
            tile_labels: s.tile_labels.clone(),
        };
        text.push_str(&serde_json::to_string(&record).expect("record serializes"));
        text.push('\n');
    }
    fs::write(&sidecar, &bytes).map_err(io_err(&sidecar))?;
    fs::write(manifest, text).map_err(io_err(manifest))
}

/// Reads a dataset; any defect yields an error and no partial dataset.
pub fn read_dataset(manifest: &Path) -> Result<Dataset, DatasetError> {
    let text = fs::read_to_string(manifest).map_err(io_err(manifest))?;
    let path = manifest.display().to_string();
    let parse = |line: usize, detail: String| DatasetError::Parse {
        path: path.clone(),
        line,
        detail,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| parse(1, "empty manifest".into()))?;
    let header: Header = serde_json::from_str(first).map_err(|e| parse(1, format!("header: {e}")))?;
    if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
        return Err(parse(
            1,
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    let records = lines
        .map(|(i, l)| serde_json::from_str::<SlideRecord>(l).map_err(|e| parse(i + 1, e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    if records.len() != header.slides {
        return Err(DatasetError::Validation(format!(
            "header declares {} slides, manifest has {}",
            header.slides,
            records.len()
        )));
    }
    let declared: usize = records.iter().map(|r| r.n_instances).sum();
    if declared != header.instances {
        return Err(DatasetError::Validation(format!(
            "header declares {} instances, records sum to {declared}",
            header.instances
        )));
    }

    let sidecar = manifest.with_file_name(&header.sidecar);
    let bytes = fs::read(&sidecar).map_err(io_err(&sidecar))?;
    let side_path = sidecar.display().to_string();
    let width = header.instance.width();
    let mut slides = Vec::with_capacity(records.len());
    for r in records {
        let expected = (r.n_instances * width * 4) as u64;
        if r.len != expected {
            return Err(DatasetError::Sidecar {
                path: side_path,
                offset: r.offset,
                detail: format!("slide {} has length {} bytes, expected {expected}", r.slide_id, r.len),
            });
        }
        let end = r.offset.checked_add(r.len).filter(|&e| e <= bytes.len() as u64);
        let Some(end) = end else {
            return Err(DatasetError::Sidecar {
                path: side_path,
                offset: r.offset,
                detail: format!("slide {} runs past end of file ({} bytes)", r.slide_id, bytes.len()),
            });
        };
        let data = bytes[r.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        slides.push(Slide {
            slide_id: r.slide_id,
            patient_id: r.patient_id,
            cohort: r.cohort,
            label: r.label,
            instances: Tensor::matrix(r.n_instances, width, data),
            tile_labels: r.tile_labels,
        });
    }
    let dataset = Dataset {
        cohorts: header.cohorts,
        classes: header.classes,
        kind: header.instance,
        slides,
    };
    dataset.validate()?;
    Ok(dataset)
}
