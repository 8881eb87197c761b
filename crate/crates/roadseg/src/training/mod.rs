//! Dice-loss training with the reduce-on-plateau schedule, per-epoch
//! history, and best-by-validation snapshots.

pub mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};

use std::time::Instant;

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{augment_pair, extract_window, AugmentParams, SamplePair};
use crate::error::{Error, Result};
use crate::models::{Model, SlidingCnn, StateTensor, Unet};
use crate::nn::{dice_loss_batch, dice_loss_rows, Adam};
use crate::objectives::{self, ConfusionCounts, LossConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub plateau_factor: f64,
    /// Validation-loss improvement below this does not reset the plateau.
    pub plateau_min_delta: f64,
    pub plateau_patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub dropout_after_concat: f64,
    pub val_ratio: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 1e-4,
            plateau_factor: 0.5,
            plateau_min_delta: 2e-4,
            plateau_patience: 5,
            batch_size: 8,
            max_epochs: 100,
            dropout_after_concat: 0.2,
            val_ratio: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.plateau_factor && self.plateau_factor < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "plateau factor must be in (0, 1), got {}",
                self.plateau_factor
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidConfig("max epochs must be >= 1".into()));
        }
        if !(self.initial_lr > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_ratio) || self.val_ratio == 0.0 {
            return Err(Error::InvalidConfig(format!(
                "val ratio must be in (0, 1), got {}",
                self.val_ratio
            )));
        }
        Ok(())
    }
}

/// One epoch of metrics. `wall_time` is diagnostic only and never exported.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_f1_pixel: f64,
    pub val_iou: f64,
    pub learning_rate: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.records
            .iter()
            .map(|r| r.val_loss)
            .min_by(|a, b| a.total_cmp(b))
    }

    /// Six-column table: epoch, train_loss, val_loss, val_f1, val_iou, lr.
    /// Wall time is intentionally excluded so reruns are byte-identical.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_f1,val_iou,lr\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:e}\n",
                r.epoch, r.train_loss, r.val_loss, r.val_f1_pixel, r.val_iou, r.learning_rate
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Learning rate implied by a history under the reduce-on-plateau rule:
/// every `patience` consecutive epochs without an improvement greater than
/// `min_delta` halve the rate (by `plateau_factor`) and reset the counter.
///
/// Pure in the history, so resumed runs recompute the same schedule.
pub fn lr_plateau_update(history: &TrainHistory, cfg: &TrainConfig) -> f64 {
    let mut lr = cfg.initial_lr;
    let mut best = f64::INFINITY;
    let mut since_improvement = 0usize;
    for rec in &history.records {
        if rec.val_loss < best - cfg.plateau_min_delta {
            best = rec.val_loss;
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= cfg.plateau_patience {
                lr *= cfg.plateau_factor;
                since_improvement = 0;
            }
        }
    }
    lr
}

/// A cloned copy of every persistable tensor of a model.
pub struct StateSnapshot {
    tensors: Vec<(String, ArrayD<f32>)>,
}

impl StateSnapshot {
    pub fn capture(model: &mut Model<f32>) -> Self {
        let mut tensors = Vec::new();
        model.visit_state(&mut |name, slot| {
            let arr = match slot {
                StateTensor::Value(v) => v.clone(),
                StateTensor::Stat(s) => s.clone().into_dyn(),
            };
            tensors.push((name, arr));
        });
        StateSnapshot { tensors }
    }

    pub fn restore(&self, model: &mut Model<f32>) {
        let mut idx = 0;
        model.visit_state(&mut |name, slot| {
            let (snap_name, arr) = &self.tensors[idx];
            assert_eq!(&name, snap_name, "snapshot order mismatch");
            match slot {
                StateTensor::Value(v) => v.assign(arr),
                StateTensor::Stat(s) => s.assign(
                    &arr.view()
                        .into_dimensionality::<ndarray::Ix1>()
                        .expect("stats are 1-d"),
                ),
            }
            idx += 1;
        });
        assert_eq!(idx, self.tensors.len(), "snapshot length mismatch");
    }

    /// Byte serialization of all tensors, for determinism comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, arr) in &self.tensors {
            out.extend_from_slice(name.as_bytes());
            for v in arr.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Result of a training run.
pub struct TrainReport {
    /// Snapshot of the epoch with minimum validation loss.
    pub best: StateSnapshot,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Per-epoch rng, a pure function of (seed, epoch).
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Pack pairs into network input/target tensors.
fn batch_tensors(pairs: &[&SamplePair]) -> (Array4<f32>, Array3<f32>) {
    let b = pairs.len();
    let (h, w) = (pairs[0].image.height(), pairs[0].image.width());
    let mut x = Array4::<f32>::zeros((b, 3, h, w));
    let mut t = Array3::<f32>::zeros((b, h, w));
    for (bi, p) in pairs.iter().enumerate() {
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    x[[bi, c, i, j]] = p.image.data[[i, j, c]];
                }
                t[[bi, i, j]] = f32::from(p.mask.data[[i, j]]);
            }
        }
    }
    (x, t)
}

/// Validation metrics for a U-Net: mean per-image dice loss, plus pixel F1
/// and IoU pooled over the whole set (prediction thresholded at 0.5).
fn evaluate_unet(model: &Unet<f32>, val: &[SamplePair]) -> Result<(f64, f64, f64)> {
    let loss_cfg = LossConfig::default();
    let mut loss_sum = 0.0;
    let mut counts = ConfusionCounts::default();
    for pair in val {
        let (x, _t) = batch_tensors(&[pair]);
        let probs = model.infer(&x)?;
        let road = probs
            .index_axis(Axis(0), 0)
            .index_axis(Axis(0), 1)
            .mapv(f64::from);
        let truth = pair.mask.to_f64();
        loss_sum += objectives::dice_loss(&road, &truth, &loss_cfg)?;
        let pred_bin = road.mapv(|v| f64::from(v > 0.5));
        counts.accumulate(&objectives::confusion_counts(&pred_bin, &truth)?);
    }
    Ok((loss_sum / val.len() as f64, counts.f1(), counts.iou()))
}

/// All grid windows and labels of a pair set, in deterministic order.
fn enumerate_windows(
    pairs: &[SamplePair],
    patch_size: usize,
    context_pad: usize,
) -> Result<Vec<(Array3<f32>, bool)>> {
    let mut out = Vec::new();
    for pair in pairs {
        let rows = pair.image.height() / patch_size;
        let cols = pair.image.width() / patch_size;
        for pr in 0..rows {
            for pc in 0..cols {
                let win = extract_window(pair, pr, pc, patch_size, context_pad)?;
                let chunk = pair.mask.data.slice(ndarray::s![
                    pr * patch_size..(pr + 1) * patch_size,
                    pc * patch_size..(pc + 1) * patch_size
                ]);
                let frac = chunk.iter().map(|&v| u64::from(v)).sum::<u64>() as f64
                    / (patch_size * patch_size) as f64;
                out.push((win.data, frac > objectives::ROAD_FRACTION_THRESHOLD));
            }
        }
    }
    Ok(out)
}

fn windows_to_tensor(windows: &[(Array3<f32>, bool)]) -> (Array4<f32>, Array1<f32>) {
    let b = windows.len();
    let side = windows[0].0.dim().0;
    let mut x = Array4::<f32>::zeros((b, 3, side, side));
    let mut t = Array1::<f32>::zeros(b);
    for (bi, (win, label)) in windows.iter().enumerate() {
        for i in 0..side {
            for j in 0..side {
                for c in 0..3 {
                    x[[bi, c, i, j]] = win[[i, j, c]];
                }
            }
        }
        t[bi] = f32::from(u8::from(*label));
    }
    (x, t)
}

/// Validation metrics for the window classifier. The classification unit is
/// a 16x16 chunk, so F1 and IoU are at chunk granularity.
fn evaluate_sliding(model: &SlidingCnn<f32>, val: &[SamplePair]) -> Result<(f64, f64, f64)> {
    let context_pad = (model.window_size - objectives::PATCH_SIZE) / 2;
    let windows = enumerate_windows(val, objectives::PATCH_SIZE, context_pad)?;
    let mut road = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(256) {
        let (x, _) = windows_to_tensor(chunk);
        let probs = model.infer(&x)?;
        road.extend(probs.index_axis(Axis(1), 1).iter().map(|&v| f64::from(v)));
    }
    let truth: Vec<f64> = windows.iter().map(|(_, l)| f64::from(u8::from(*l))).collect();
    let road_arr = Array2::from_shape_vec((1, road.len()), road).expect("flat");
    let truth_arr = Array2::from_shape_vec((1, truth.len()), truth).expect("flat");
    let loss = objectives::dice_loss(&road_arr, &truth_arr, &LossConfig::default())?;
    let pred_bin = road_arr.mapv(|v| f64::from(v > 0.5));
    let counts = objectives::confusion_counts(&pred_bin, &truth_arr)?;
    Ok((loss, counts.f1(), counts.iou()))
}

/// Train a model, extending `history` in place until it holds
/// `cfg.max_epochs` records (so a resumed run continues the same schedule).
///
/// Each epoch shuffles the training set with a (seed, epoch)-derived rng,
/// augments pairs on the fly, steps the optimizer on the dice loss, then
/// evaluates on the validation set in eval mode. The returned report holds
/// the snapshot of the best-validation epoch.
pub fn train(
    model: &mut Model<f32>,
    train_set: &[SamplePair],
    val_set: &[SamplePair],
    cfg: &TrainConfig,
    augment: &AugmentParams,
    history: &mut TrainHistory,
) -> Result<TrainReport> {
    train_with(model, train_set, val_set, cfg, augment, history, |_, _| true)
}

/// [`train`] with a per-epoch observer; returning `false` ends the run
/// early (the schedule itself never stops before `max_epochs`).
pub fn train_with(
    model: &mut Model<f32>,
    train_set: &[SamplePair],
    val_set: &[SamplePair],
    cfg: &TrainConfig,
    augment: &AugmentParams,
    history: &mut TrainHistory,
    mut on_epoch: impl FnMut(&Model<f32>, &EpochRecord) -> bool,
) -> Result<TrainReport> {
    cfg.validate()?;
    augment.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidInput(
            "training and validation sets must be nonempty".into(),
        ));
    }

    let mut adam = Adam::<f32>::new();
    // On resume, the loaded model stands in for the prior best until a new
    // epoch beats the recorded minimum.
    let mut best: Option<(usize, f64, StateSnapshot)> = history.best_val_loss().map(|v| {
        let epoch = history
            .records
            .iter()
            .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
            .map(|r| r.epoch)
            .unwrap_or(0);
        (epoch, v, StateSnapshot::capture(model))
    });

    while history.len() < cfg.max_epochs {
        let epoch = history.len();
        let started = Instant::now();
        let lr = lr_plateau_update(history, cfg);
        let mut rng = epoch_rng(cfg.seed, epoch);

        let train_loss = match model {
            Model::Unet(net) => {
                unet_epoch(net, train_set, cfg, augment, lr, epoch, &mut adam, &mut rng)?
            }
            Model::Sliding(net) => {
                sliding_epoch(net, train_set, cfg, lr, epoch, &mut adam, &mut rng)?
            }
        };

        let (val_loss, val_f1, val_iou) = match model {
            Model::Unet(net) => evaluate_unet(net, val_set)?,
            Model::Sliding(net) => evaluate_sliding(net, val_set)?,
        };

        history.records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_f1_pixel: val_f1,
            val_iou,
            learning_rate: lr,
            wall_time: started.elapsed().as_secs_f64(),
        });

        let improved = match &best {
            None => true,
            Some((_, best_loss, _)) => val_loss < *best_loss,
        };
        if improved {
            best = Some((epoch, val_loss, StateSnapshot::capture(model)));
        }

        let record = history.records.last().expect("just pushed");
        if !on_epoch(model, record) {
            break;
        }
    }

    let (best_epoch, best_val_loss, best_snapshot) =
        best.expect("at least one epoch ran or history was nonempty");
    Ok(TrainReport {
        best: best_snapshot,
        best_epoch,
        best_val_loss,
    })
}

#[allow(clippy::too_many_arguments)]
fn unet_epoch(
    net: &mut Unet<f32>,
    train_set: &[SamplePair],
    cfg: &TrainConfig,
    augment: &AugmentParams,
    lr: f64,
    epoch: usize,
    adam: &mut Adam<f32>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let order = shuffled_indices(train_set.len(), rng);
    let mut loss_sum = 0.0;
    let mut seen = 0usize;
    for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let augmented: Vec<SamplePair> = chunk
            .iter()
            .map(|&i| augment_pair(&train_set[i], augment, rng))
            .collect();
        let refs: Vec<&SamplePair> = augmented.iter().collect();
        let (x, t) = batch_tensors(&refs);

        let probs = net.forward_train(&x, rng)?;
        let (loss, grad) = dice_loss_batch(&probs, &t, 1.0f32);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: batch_idx,
                lr,
            });
        }
        for p in net.params_mut() {
            p.zero_grad();
        }
        net.backward(&grad);
        adam.step(&mut net.params_mut(), lr as f32);

        loss_sum += f64::from(loss) * chunk.len() as f64;
        seen += chunk.len();
    }
    Ok(loss_sum / seen as f64)
}

#[allow(clippy::too_many_arguments)]
fn sliding_epoch(
    net: &mut SlidingCnn<f32>,
    train_set: &[SamplePair],
    cfg: &TrainConfig,
    lr: f64,
    epoch: usize,
    adam: &mut Adam<f32>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let context_pad = (net.window_size - objectives::PATCH_SIZE) / 2;
    // One epoch covers as many random windows as the set has grid patches.
    let patches_per_epoch: usize = train_set
        .iter()
        .map(|p| (p.image.height() / objectives::PATCH_SIZE) * (p.image.width() / objectives::PATCH_SIZE))
        .sum();
    let mut loss_sum = 0.0;
    let mut seen = 0usize;
    let mut batch_idx = 0usize;
    let mut remaining = patches_per_epoch;
    while remaining > 0 {
        let b = cfg.batch_size.min(remaining);
        let mut windows = Vec::with_capacity(b);
        for _ in 0..b {
            let (win, label) = crate::dataset::sample_training_window(
                train_set,
                objectives::PATCH_SIZE,
                context_pad,
                rng,
            )?;
            windows.push((win.data, label));
        }
        let (x, t) = windows_to_tensor(&windows);
        let probs = net.forward_train(&x, rng)?;
        let (loss, grad) = dice_loss_rows(&probs, &t, 1.0f32);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: batch_idx,
                lr,
            });
        }
        for p in net.params_mut() {
            p.zero_grad();
        }
        net.backward(&grad);
        adam.step(&mut net.params_mut(), lr as f32);

        loss_sum += f64::from(loss) * b as f64;
        seen += b;
        remaining -= b;
        batch_idx += 1;
    }
    Ok(loss_sum / seen as f64)
}
