//! Visual outputs: prediction overlays, 16-bit probability exports, and the
//! training loss curve.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use ndarray::Array2;

use crate::dataset::RasterImage;
use crate::error::{Error, Result};
use crate::objectives::PatchGrid;
use crate::training::TrainHistory;

/// What to draw over the input: a per-pixel road-probability map or a
/// chunk-label grid.
pub enum Prediction<'a> {
    Map(&'a Array2<f64>),
    Grid(&'a PatchGrid),
}

/// Alpha-blend road predictions (red tint) over the input image.
///
/// The blend weight is `0.5 * value`, so an all-zero prediction writes the
/// input unchanged and an all-one prediction tints every pixel.
pub fn render_overlay(image: &RasterImage, pred: Prediction<'_>, path: &Path) -> Result<()> {
    let (h, w, _) = image.data.dim();
    let value_at = |i: usize, j: usize| -> f64 {
        match &pred {
            Prediction::Map(m) => {
                if m.dim() != (h, w) {
                    return f64::NAN;
                }
                m[[i, j]]
            }
            Prediction::Grid(g) => {
                let (gi, gj) = (i / g.patch_size, j / g.patch_size);
                if gi >= g.rows() || gj >= g.cols() {
                    return f64::NAN;
                }
                f64::from(g.labels[[gi, gj]])
            }
        }
    };
    // Validate shapes up front so failures do not half-write files.
    match &pred {
        Prediction::Map(m) if m.dim() != (h, w) => {
            return Err(Error::ShapeMismatch(format!(
                "overlay map {:?} vs image {h}x{w}",
                m.dim()
            )))
        }
        Prediction::Grid(g)
            if g.rows() * g.patch_size != h || g.cols() * g.patch_size != w =>
        {
            return Err(Error::ShapeMismatch(format!(
                "overlay grid {}x{} (chunk {}) vs image {h}x{w}",
                g.rows(),
                g.cols(),
                g.patch_size
            )))
        }
        _ => {}
    }

    let mut out = RgbImage::new(w as u32, h as u32);
    for (x, y, p) in out.enumerate_pixels_mut() {
        let (i, j) = (y as usize, x as usize);
        let a = (0.5 * value_at(i, j)).clamp(0.0, 1.0) as f32;
        let src = [
            image.data[[i, j, 0]],
            image.data[[i, j, 1]],
            image.data[[i, j, 2]],
        ];
        let tinted = [
            src[0] * (1.0 - a) + a, // toward red
            src[1] * (1.0 - a),
            src[2] * (1.0 - a),
        ];
        for c in 0..3 {
            p.0[c] = (tinted[c] * 255.0).round() as u8;
        }
    }
    out.save(path).map_err(|e| Error::image(path, e))
}

/// Export a road-probability map as 16-bit grayscale
/// (`value = round(prob * 65535)`).
pub fn save_probability_png16(map: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let mut out: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
    for (x, y, p) in out.enumerate_pixels_mut() {
        let v = map[[y as usize, x as usize]].clamp(0.0, 1.0);
        p.0[0] = (v * 65535.0).round() as u16;
    }
    out.save(path).map_err(|e| Error::image(path, e))
}

const CURVE_W: usize = 640;
const CURVE_H: usize = 400;
const MARGIN: usize = 40;

fn draw_line(img: &mut GrayImage, x0: f64, y0: f64, x1: f64, y1: f64, shade: u8) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = x0 + (x1 - x0) * t;
        let y = y0 + (y1 - y0) * t;
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Luma([shade]));
        }
    }
}

/// Plot train (dark) and validation (mid-gray) loss per epoch.
pub fn render_loss_curve(history: &TrainHistory, path: &Path) -> Result<()> {
    let mut img = GrayImage::from_pixel(CURVE_W as u32, CURVE_H as u32, Luma([255]));
    // Axes.
    draw_line(
        &mut img,
        MARGIN as f64,
        (CURVE_H - MARGIN) as f64,
        (CURVE_W - MARGIN / 2) as f64,
        (CURVE_H - MARGIN) as f64,
        0,
    );
    draw_line(
        &mut img,
        MARGIN as f64,
        (MARGIN / 2) as f64,
        MARGIN as f64,
        (CURVE_H - MARGIN) as f64,
        0,
    );

    let n = history.records.len();
    if n > 0 {
        let max_loss = history
            .records
            .iter()
            .flat_map(|r| [r.train_loss, r.val_loss])
            .fold(1e-9f64, f64::max);
        let to_xy = |epoch: usize, loss: f64| {
            let x = MARGIN as f64
                + (CURVE_W - MARGIN - MARGIN / 2) as f64 * epoch as f64 / n.max(2) as f64;
            let y = (CURVE_H - MARGIN) as f64
                - (CURVE_H - MARGIN - MARGIN / 2) as f64 * (loss / max_loss).clamp(0.0, 1.0);
            (x, y)
        };
        for pair in history.records.windows(2) {
            let (x0, y0) = to_xy(pair[0].epoch, pair[0].train_loss);
            let (x1, y1) = to_xy(pair[1].epoch, pair[1].train_loss);
            draw_line(&mut img, x0, y0, x1, y1, 32);
            let (x0, y0) = to_xy(pair[0].epoch, pair[0].val_loss);
            let (x1, y1) = to_xy(pair[1].epoch, pair[1].val_loss);
            draw_line(&mut img, x0, y0, x1, y1, 128);
        }
    }
    img.save(path).map_err(|e| Error::image(path, e))
}
