//! Full-image prediction, ensemble averaging, chunk-label aggregation, and
//! submission-file output.

use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{mirror_pad, RasterImage};
use crate::error::{Error, Result};
use crate::models::{ProbabilityMap, SlidingCnn, Unet};
use crate::objectives::{self, PatchGrid, PATCH_SIZE};

/// How checkpointed members combine: arithmetic mean of probability maps,
/// thresholded on the chunk-mean road probability.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleSpec {
    pub member_checkpoints: Vec<PathBuf>,
    pub decision_threshold: f64,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        EnsembleSpec {
            member_checkpoints: Vec::new(),
            decision_threshold: objectives::ROAD_FRACTION_THRESHOLD,
        }
    }
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.member_checkpoints.is_empty() {
            return Err(Error::InvalidConfig(
                "ensemble needs at least one member checkpoint".into(),
            ));
        }
        if !(0.0 < self.decision_threshold && self.decision_threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "decision threshold must be in (0, 1), got {}",
                self.decision_threshold
            )));
        }
        Ok(())
    }
}

fn image_to_batch(image: &RasterImage) -> Array4<f32> {
    let (h, w, c) = image.data.dim();
    let mut x = Array4::<f32>::zeros((1, c, h, w));
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                x[[0, ch, i, j]] = image.data[[i, j, ch]];
            }
        }
    }
    x
}

/// Full-resolution 2-class probability map of one image (eval mode).
pub fn predict_mask(model: &Unet<f32>, image: &RasterImage) -> Result<ProbabilityMap> {
    let x = image_to_batch(image);
    let probs = model.infer(&x)?;
    ProbabilityMap::new(probs.index_axis(Axis(0), 0).to_owned())
}

/// Scan the window classifier over every 16x16 chunk; mirror padding
/// supplies border context. A chunk is road iff its window's road
/// probability exceeds 0.5.
pub fn predict_mask_sliding(model: &SlidingCnn<f32>, image: &RasterImage) -> Result<PatchGrid> {
    let (h, w) = (image.height(), image.width());
    if h % PATCH_SIZE != 0 || w % PATCH_SIZE != 0 {
        return Err(Error::InvalidInput(format!(
            "image sides must be divisible by {PATCH_SIZE}, got {h}x{w}"
        )));
    }
    let context_pad = (model.window_size - PATCH_SIZE) / 2;
    let padded = mirror_pad(image, context_pad)?;
    let (rows, cols) = (h / PATCH_SIZE, w / PATCH_SIZE);
    let side = model.window_size;

    let mut labels = ndarray::Array2::<u8>::zeros((rows, cols));
    let chunk_ids: Vec<(usize, usize)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .collect();
    for batch in chunk_ids.chunks(256) {
        let mut x = Array4::<f32>::zeros((batch.len(), 3, side, side));
        for (bi, &(pr, pc)) in batch.iter().enumerate() {
            let win = padded.crop(pr * PATCH_SIZE, pc * PATCH_SIZE, side, side);
            for i in 0..side {
                for j in 0..side {
                    for ch in 0..3 {
                        x[[bi, ch, i, j]] = win.data[[i, j, ch]];
                    }
                }
            }
        }
        let probs = model.infer(&x)?;
        for (bi, &(pr, pc)) in batch.iter().enumerate() {
            labels[[pr, pc]] = u8::from(probs[[bi, 1]] > 0.5);
        }
    }
    Ok(PatchGrid {
        patch_size: PATCH_SIZE,
        threshold: 0.5,
        labels,
    })
}

/// Elementwise arithmetic mean of probability maps. The mean of normalized
/// pairs stays normalized.
pub fn ensemble_average(maps: &[ProbabilityMap]) -> Result<ProbabilityMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidInput("ensemble of zero maps".into()))?;
    let dim = first.data.dim();
    let mut sum = Array3::<f32>::zeros(dim);
    for m in maps {
        if m.data.dim() != dim {
            return Err(Error::ShapeMismatch(format!(
                "map shapes differ: {:?} vs {:?}",
                dim,
                m.data.dim()
            )));
        }
        sum += &m.data;
    }
    let n = maps.len() as f32;
    Ok(ProbabilityMap { data: sum / n })
}

/// Aggregate a probability map into chunk labels: mean road probability per
/// 16x16 chunk, strictly above the ensemble decision threshold.
pub fn decide_labels(map: &ProbabilityMap, spec: &EnsembleSpec) -> Result<PatchGrid> {
    if !(0.0 < spec.decision_threshold && spec.decision_threshold < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "decision threshold must be in (0, 1), got {}",
            spec.decision_threshold
        )));
    }
    objectives::patch_labels_with(&map.road_f64(), PATCH_SIZE, spec.decision_threshold)
}

/// One chunk of one image in the submission table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubmissionRecord {
    pub image_number: u32,
    pub row_offset: usize,
    pub col_offset: usize,
    pub label: u8,
}

/// Flatten a grid into submission records (offsets in pixels).
pub fn grid_records(image_number: u32, grid: &PatchGrid) -> Vec<SubmissionRecord> {
    let mut out = Vec::with_capacity(grid.label_count());
    for i in 0..grid.rows() {
        for j in 0..grid.cols() {
            out.push(SubmissionRecord {
                image_number,
                row_offset: i * grid.patch_size,
                col_offset: j * grid.patch_size,
                label: grid.labels[[i, j]],
            });
        }
    }
    out
}

/// Render records as the submission table: header `id,prediction`, one
/// `{image:03}_{row}_{col},{label}` line per record, sorted, LF endings.
pub fn format_submission(records: &[SubmissionRecord]) -> String {
    let mut sorted = records.to_vec();
    sorted.sort_by_key(|r| (r.image_number, r.row_offset, r.col_offset));
    let mut out = String::from("id,prediction\n");
    for r in &sorted {
        out.push_str(&format!(
            "{:03}_{}_{},{}\n",
            r.image_number, r.row_offset, r.col_offset, r.label
        ));
    }
    out
}

pub fn write_submission(records: &[SubmissionRecord], path: &Path) -> Result<()> {
    if let Some(bad) = records.iter().find(|r| r.label > 1) {
        return Err(Error::InvalidInput(format!(
            "submission label must be 0 or 1, got {} for image {}",
            bad.label, bad.image_number
        )));
    }
    std::fs::write(path, format_submission(records).as_bytes()).map_err(|e| Error::io(path, e))
}

/// Parse a submission table back into records.
pub fn parse_submission(text: &str) -> Result<Vec<SubmissionRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("id,prediction") => {}
        other => {
            return Err(Error::InvalidInput(format!(
                "bad submission header: {other:?}"
            )))
        }
    }
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let parse = || -> Option<SubmissionRecord> {
            let (id, label) = line.split_once(',')?;
            let mut parts = id.split('_');
            let image_number = parts.next()?.parse().ok()?;
            let row_offset = parts.next()?.parse().ok()?;
            let col_offset = parts.next()?.parse().ok()?;
            if parts.next().is_some() {
                return None;
            }
            let label: u8 = label.parse().ok()?;
            (label <= 1).then_some(SubmissionRecord {
                image_number,
                row_offset,
                col_offset,
                label,
            })
        };
        out.push(parse().ok_or_else(|| {
            Error::InvalidInput(format!("bad submission line {}: `{line}`", ln + 2))
        })?);
    }
    Ok(out)
}
