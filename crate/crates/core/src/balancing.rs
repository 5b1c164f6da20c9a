//! Hierarchical sample weights for the pretraining (cohort → slide → tile)
//! and MIL (cohort·class → slide) phases, plus clipping and per-batch
//! renormalization.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BalanceError {
    #[error("empty hierarchy")]
    Empty,
    #[error("slide {0} has no tiles")]
    EmptySlide(String),
    #[error("need at least 2 weights to clip, got {0}")]
    TooFewWeights(usize),
    #[error("batch weights are all zero")]
    AllZero,
    #[error("weight {index} is not a finite nonnegative number: {value}")]
    BadWeight { index: usize, value: f64 },
}

/// One slide as seen by the pretraining phase.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideTiles {
    pub cohort: usize,
    pub slide_id: String,
    pub tiles: usize,
}

/// One slide as seen by the MIL phase.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideLabel {
    pub cohort: usize,
    pub slide_id: String,
    pub label: usize,
}

/// Per-tile weight for every slide, in input order: `weights[s]` is the
/// (shared) weight of each of slide `s`'s tiles.
pub fn pretrain_weights(slides: &[SlideTiles]) -> Result<Vec<f64>, BalanceError> {
    if slides.is_empty() {
        return Err(BalanceError::Empty);
    }
    if let Some(s) = slides.iter().find(|s| s.tiles == 0) {
        return Err(BalanceError::EmptySlide(s.slide_id.clone()));
    }
    let mut per_cohort: BTreeMap<usize, usize> = BTreeMap::new();
    for s in slides {
        *per_cohort.entry(s.cohort).or_default() += 1;
    }
    let cohorts = per_cohort.len() as f64;
    Ok(slides
        .iter()
        .map(|s| 1.0 / cohorts / per_cohort[&s.cohort] as f64 / s.tiles as f64)
        .collect())
}

/// Per-slide weight, in input order.
pub fn mil_weights(slides: &[SlideLabel]) -> Result<Vec<f64>, BalanceError> {
    if slides.is_empty() {
        return Err(BalanceError::Empty);
    }
    let mut per_combo: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for s in slides {
        *per_combo.entry((s.cohort, s.label)).or_default() += 1;
    }
    let combos = per_combo.len() as f64;
    Ok(slides
        .iter()
        .map(|s| 1.0 / combos / per_combo[&(s.cohort, s.label)] as f64)
        .collect())
}

/// Population mean and standard deviation.
pub fn mean_std(weights: &[f64]) -> (f64, f64) {
    let n = weights.len() as f64;
    let mean = weights.iter().sum::<f64>() / n;
    let var = weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Clip bounds `[max(0, mean − 2σ), mean + 2σ]`.
pub fn clip_bounds(weights: &[f64]) -> Result<(f64, f64), BalanceError> {
    check(weights)?;
    if weights.len() < 2 {
        return Err(BalanceError::TooFewWeights(weights.len()));
    }
    let (mean, std) = mean_std(weights);
    Ok(((mean - 2.0 * std).max(0.0), mean + 2.0 * std))
}

pub fn clip_weights(weights: &[f64]) -> Result<Vec<f64>, BalanceError> {
    let (lo, hi) = clip_bounds(weights)?;
    Ok(weights.iter().map(|&w| w.clamp(lo, hi)).collect())
}

/// Rescales a batch to unit mean.
pub fn batch_renormalize(weights: &[f64]) -> Result<Vec<f64>, BalanceError> {
    check(weights)?;
    if weights.is_empty() {
        return Err(BalanceError::Empty);
    }
    let sum: f64 = weights.iter().sum();
    if sum == 0.0 {
        return Err(BalanceError::AllZero);
    }
    let scale = weights.len() as f64 / sum;
    Ok(weights.iter().map(|w| w * scale).collect())
}

fn check(weights: &[f64]) -> Result<(), BalanceError> {
    match weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
        Some(index) => Err(BalanceError::BadWeight {
            index,
            value: weights[index],
        }),
        None => Ok(()),
    }
}

/// Tab-separated `sample_id  raw_weight  clipped_weight` table with header.
pub fn weight_table(ids: &[String], raw: &[f64], clipped: &[f64]) -> String {
    let mut out = String::from("sample_id\traw_weight\tclipped_weight\n");
    for ((id, r), c) in ids.iter().zip(raw).zip(clipped) {
        let _ = writeln!(out, "{id}\t{r:e}\t{c:e}");
    }
    out
}

/// Parses a table written by [`weight_table`].
pub fn parse_weight_table(text: &str) -> Result<Vec<(String, f64, f64)>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some("sample_id\traw_weight\tclipped_weight") => {}
        other => return Err(format!("bad header: {other:?}")),
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(format!("line {}: expected 3 columns", i + 2));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| format!("line {}: {e}", i + 2));
            Ok((cols[0].to_string(), num(cols[1])?, num(cols[2])?))
        })
        .collect()
}
