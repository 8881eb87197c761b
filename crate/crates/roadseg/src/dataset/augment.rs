//! Geometric augmentation applied identically to an image and its mask.
//!
//! One affine transform (rotation, shift, shear, zoom) plus independent flip
//! decisions is drawn per call. The image is resampled bilinearly, the mask
//! nearest-neighbor, both with reflected out-of-range coordinates, so masks
//! stay strictly binary.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BinaryMask, RasterImage, SamplePair};
use crate::error::{Error, Result};

/// Augmentation ranges. Rotation and shear are in degrees; shifts are
/// fractions of the image sides; zoom is a fractional deviation from 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    pub rotation_range: f64,
    pub width_shift_range: f64,
    pub height_shift_range: f64,
    pub shear_range: f64,
    pub zoom_range: f64,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            rotation_range: 0.2,
            width_shift_range: 0.2,
            height_shift_range: 0.2,
            shear_range: 0.2,
            zoom_range: 0.2,
            horizontal_flip: true,
            vertical_flip: true,
            seed: 0,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            self.rotation_range,
            self.width_shift_range,
            self.height_shift_range,
            self.shear_range,
            self.zoom_range,
        ];
        if ranges.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::InvalidConfig(
                "augmentation ranges must be nonnegative".into(),
            ));
        }
        if self.zoom_range >= 1.0 {
            return Err(Error::InvalidConfig(
                "zoom range must be below 1 (zoom factor stays positive)".into(),
            ));
        }
        Ok(())
    }

    /// Identity augmentation (all ranges zero, flips off).
    pub fn none() -> Self {
        AugmentParams {
            rotation_range: 0.0,
            width_shift_range: 0.0,
            height_shift_range: 0.0,
            shear_range: 0.0,
            zoom_range: 0.0,
            horizontal_flip: false,
            vertical_flip: false,
            seed: 0,
        }
    }
}

/// One concrete draw: a forward 2x3 affine map about the image center plus
/// flip decisions. Tests can construct this directly for determinism.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledTransform {
    /// Row-major `[[a, b, c], [d, e, f]]` mapping source (x, y) to output.
    pub affine: [[f64; 3]; 2],
    pub h_flip: bool,
    pub v_flip: bool,
}

impl SampledTransform {
    pub fn identity() -> Self {
        SampledTransform {
            affine: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            h_flip: false,
            v_flip: false,
        }
    }
}

fn mat_mul(a: [[f64; 3]; 2], b: [[f64; 3]; 2]) -> [[f64; 3]; 2] {
    // Compose affine maps (implicit third row [0, 0, 1]).
    let mut out = [[0.0; 3]; 2];
    for i in 0..2 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
        out[i][2] += a[i][2];
    }
    out
}

/// Draw one transform from the parameter ranges.
pub fn sample_transform(
    params: &AugmentParams,
    width: usize,
    height: usize,
    rng: &mut ChaCha8Rng,
) -> SampledTransform {
    let sym = |rng: &mut ChaCha8Rng, r: f64| {
        if r == 0.0 {
            0.0
        } else {
            rng.random_range(-r..=r)
        }
    };
    let theta = sym(rng, params.rotation_range).to_radians();
    let tx = sym(rng, params.width_shift_range) * width as f64;
    let ty = sym(rng, params.height_shift_range) * height as f64;
    let shear = sym(rng, params.shear_range).to_radians();
    let (zx, zy) = if params.zoom_range == 0.0 {
        (1.0, 1.0)
    } else {
        (
            rng.random_range(1.0 - params.zoom_range..=1.0 + params.zoom_range),
            rng.random_range(1.0 - params.zoom_range..=1.0 + params.zoom_range),
        )
    };

    let rot = [
        [theta.cos(), -theta.sin(), 0.0],
        [theta.sin(), theta.cos(), 0.0],
    ];
    let sh = [[1.0, -shear.sin(), 0.0], [0.0, shear.cos(), 0.0]];
    let zoom = [[zx, 0.0, 0.0], [0.0, zy, 0.0]];
    let shift = [[1.0, 0.0, tx], [0.0, 1.0, ty]];
    let affine = mat_mul(shift, mat_mul(rot, mat_mul(sh, zoom)));

    let h_flip = params.horizontal_flip && rng.random::<bool>();
    let v_flip = params.vertical_flip && rng.random::<bool>();
    SampledTransform {
        affine,
        h_flip,
        v_flip,
    }
}

fn invert_affine(m: [[f64; 3]; 2]) -> [[f64; 3]; 2] {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    assert!(det.abs() > 1e-12, "degenerate affine transform");
    let inv = [
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ];
    [
        [inv[0][0], inv[0][1], -(inv[0][0] * m[0][2] + inv[0][1] * m[1][2])],
        [inv[1][0], inv[1][1], -(inv[1][0] * m[0][2] + inv[1][1] * m[1][2])],
    ]
}

fn reflect_coord(x: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let period = 2.0 * (n as f64 - 1.0);
    let mut m = x % period;
    if m < 0.0 {
        m += period;
    }
    if m > n as f64 - 1.0 {
        m = period - m;
    }
    m
}

/// Apply a sampled transform to a pair. The same source coordinates drive
/// both members; only the sampling filter differs.
pub fn apply_transform(pair: &SamplePair, t: &SampledTransform) -> SamplePair {
    let (h, w, c) = pair.image.data.dim();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let inv = invert_affine(t.affine);

    let mut img = Array3::<f32>::zeros((h, w, c));
    let mut mask = Array2::<u8>::zeros((h, w));
    for r in 0..h {
        for col in 0..w {
            // Output pixel -> source coordinates, about the center.
            let ox = col as f64 - cx;
            let oy = r as f64 - cy;
            let sx = inv[0][0] * ox + inv[0][1] * oy + inv[0][2] + cx;
            let sy = inv[1][0] * ox + inv[1][1] * oy + inv[1][2] + cy;

            // Bilinear sample of the image with reflected coordinates.
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = (sx - x0) as f32;
            let fy = (sy - y0) as f32;
            let xi0 = reflect_coord(x0, w).round() as usize;
            let xi1 = reflect_coord(x0 + 1.0, w).round() as usize;
            let yi0 = reflect_coord(y0, h).round() as usize;
            let yi1 = reflect_coord(y0 + 1.0, h).round() as usize;
            for ch in 0..c {
                let v00 = pair.image.data[[yi0, xi0, ch]];
                let v01 = pair.image.data[[yi0, xi1, ch]];
                let v10 = pair.image.data[[yi1, xi0, ch]];
                let v11 = pair.image.data[[yi1, xi1, ch]];
                let top = v00 * (1.0 - fx) + v01 * fx;
                let bot = v10 * (1.0 - fx) + v11 * fx;
                img[[r, col, ch]] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0);
            }

            // Nearest-neighbor sample of the mask keeps it binary.
            let mx = reflect_coord(sx.round(), w).round() as usize;
            let my = reflect_coord(sy.round(), h).round() as usize;
            mask[[r, col]] = pair.mask.data[[my, mx]];
        }
    }

    if t.h_flip {
        img.invert_axis(ndarray::Axis(1));
        mask.invert_axis(ndarray::Axis(1));
    }
    if t.v_flip {
        img.invert_axis(ndarray::Axis(0));
        mask.invert_axis(ndarray::Axis(0));
    }

    SamplePair {
        image: RasterImage { data: img },
        mask: BinaryMask { data: mask },
        source_id: pair.source_id.clone(),
    }
}

/// Draw a transform and apply it identically to image and mask.
pub fn augment_pair(
    pair: &SamplePair,
    params: &AugmentParams,
    rng: &mut ChaCha8Rng,
) -> SamplePair {
    let t = sample_transform(params, pair.image.width(), pair.image.height(), rng);
    apply_transform(pair, &t)
}
