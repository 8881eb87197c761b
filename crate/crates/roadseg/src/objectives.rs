//! Loss and evaluation metrics: smoothed dice, IoU, pixel F1, and the
//! 16x16 patch-labeling protocol with pooled patch-level F1.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of a label chunk, in pixels.
pub const PATCH_SIZE: usize = 16;

/// A chunk is labeled road iff its road fraction strictly exceeds this.
pub const ROAD_FRACTION_THRESHOLD: f64 = 0.25;

/// Smoothing coefficient for the dice loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { epsilon: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "dice epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Pixel-level confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub t_p: u64,
    pub f_p: u64,
    pub f_n: u64,
    pub t_n: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.t_p + self.f_p + self.f_n + self.t_n
    }

    pub fn accumulate(&mut self, other: &ConfusionCounts) {
        self.t_p += other.t_p;
        self.f_p += other.f_p;
        self.f_n += other.f_n;
        self.t_n += other.t_n;
    }

    /// F1 = tp / (tp + (fp + fn)/2); 1 when nothing is positive anywhere.
    pub fn f1(&self) -> f64 {
        if self.t_p + self.f_p + self.f_n == 0 {
            return 1.0;
        }
        let tp = self.t_p as f64;
        tp / (tp + 0.5 * (self.f_p + self.f_n) as f64)
    }

    /// IoU = tp / (tp + fp + fn); 1 when nothing is positive anywhere.
    pub fn iou(&self) -> f64 {
        let union = self.t_p + self.f_p + self.f_n;
        if union == 0 {
            return 1.0;
        }
        self.t_p as f64 / union as f64
    }
}

fn check_same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "expected {:?}, got {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn counts_from_masks(pred: &Array2<f64>, truth: &Array2<f64>) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        match (p > 0.5, t > 0.5) {
            (true, true) => c.t_p += 1,
            (true, false) => c.f_p += 1,
            (false, true) => c.f_n += 1,
            (false, false) => c.t_n += 1,
        }
    }
    c
}

/// Smoothed dice loss of a road-probability map against a binary mask:
/// `1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps)`.
///
/// Soft intersection and magnitudes, so `pred` may hold probabilities.
/// With `epsilon > 0` the loss is defined and differentiable everywhere.
pub fn dice_loss(pred: &Array2<f64>, truth: &Array2<f64>, cfg: &LossConfig) -> Result<f64> {
    check_same_shape(pred, truth)?;
    cfg.validate()?;
    Ok(dice_loss_raw(pred, truth, cfg.epsilon))
}

/// Dice loss without the epsilon > 0 restriction. With `eps = 0` the
/// both-empty case is defined as 0 (a perfect prediction).
pub fn dice_loss_raw(pred: &Array2<f64>, truth: &Array2<f64>, eps: f64) -> f64 {
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_t = 0.0;
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        inter += p * t;
        sum_p += p;
        sum_t += t;
    }
    let den = sum_p + sum_t + eps;
    if den == 0.0 {
        return 0.0;
    }
    1.0 - (2.0 * inter + eps) / den
}

/// Analytic gradient of [`dice_loss`] with respect to `pred`.
pub fn dice_loss_grad(
    pred: &Array2<f64>,
    truth: &Array2<f64>,
    cfg: &LossConfig,
) -> Result<Array2<f64>> {
    check_same_shape(pred, truth)?;
    cfg.validate()?;
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_t = 0.0;
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        inter += p * t;
        sum_p += p;
        sum_t += t;
    }
    let num = 2.0 * inter + cfg.epsilon;
    let den = sum_p + sum_t + cfg.epsilon;
    let den2 = den * den;
    Ok(truth.mapv(|t| (num - 2.0 * t * den) / den2))
}

/// Intersection over union of two binary masks; both-empty is 1.
pub fn iou(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<f64> {
    check_same_shape(pred, truth)?;
    Ok(counts_from_masks(pred, truth).iou())
}

/// Pixel-level F1 of two binary masks; both-empty is 1.
pub fn f1_pixel(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<f64> {
    check_same_shape(pred, truth)?;
    Ok(counts_from_masks(pred, truth).f1())
}

/// Pixel-level confusion counts of two binary masks.
pub fn confusion_counts(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<ConfusionCounts> {
    check_same_shape(pred, truth)?;
    Ok(counts_from_masks(pred, truth))
}

/// Chunk labels for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub threshold: f64,
    pub labels: Array2<u8>,
}

impl PatchGrid {
    pub fn rows(&self) -> usize {
        self.labels.dim().0
    }

    pub fn cols(&self) -> usize {
        self.labels.dim().1
    }

    pub fn label_count(&self) -> usize {
        self.labels.len()
    }
}

/// Aggregate a per-pixel road map (binary mask or probabilities) into chunk
/// labels: road iff the chunk mean strictly exceeds the threshold. Image
/// sides must be divisible by the patch size.
pub fn patch_labels(map: &Array2<f64>) -> Result<PatchGrid> {
    patch_labels_with(map, PATCH_SIZE, ROAD_FRACTION_THRESHOLD)
}

pub fn patch_labels_with(
    map: &Array2<f64>,
    patch_size: usize,
    threshold: f64,
) -> Result<PatchGrid> {
    let (h, w) = map.dim();
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::InvalidInput(format!(
            "image sides {h}x{w} are not divisible by patch size {patch_size}"
        )));
    }
    let (rows, cols) = (h / patch_size, w / patch_size);
    let mut labels = Array2::<u8>::zeros((rows, cols));
    let area = (patch_size * patch_size) as f64;
    for i in 0..rows {
        for j in 0..cols {
            let chunk = map.slice(ndarray::s![
                i * patch_size..(i + 1) * patch_size,
                j * patch_size..(j + 1) * patch_size
            ]);
            let mean = chunk.sum() / area;
            labels[[i, j]] = u8::from(mean > threshold);
        }
    }
    Ok(PatchGrid {
        patch_size,
        threshold,
        labels,
    })
}

/// Patch-level F1 with confusion counts pooled over all chunks of all images.
pub fn f1_patch(pred_grids: &[PatchGrid], truth_grids: &[PatchGrid]) -> Result<f64> {
    if pred_grids.len() != truth_grids.len() {
        return Err(Error::ShapeMismatch(format!(
            "grid list lengths differ: {} vs {}",
            pred_grids.len(),
            truth_grids.len()
        )));
    }
    let mut counts = ConfusionCounts::default();
    for (p, t) in pred_grids.iter().zip(truth_grids.iter()) {
        if p.labels.dim() != t.labels.dim() {
            return Err(Error::ShapeMismatch(format!(
                "grid shapes differ: {:?} vs {:?}",
                p.labels.dim(),
                t.labels.dim()
            )));
        }
        for (&pl, &tl) in p.labels.iter().zip(t.labels.iter()) {
            match (pl == 1, tl == 1) {
                (true, true) => counts.t_p += 1,
                (true, false) => counts.f_p += 1,
                (false, true) => counts.f_n += 1,
                (false, false) => counts.t_n += 1,
            }
        }
    }
    Ok(counts.f1())
}
