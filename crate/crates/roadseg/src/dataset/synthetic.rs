//! Synthetic road scenes: line strokes over textured noise, with exact
//! ground-truth masks. Used for desk-scale end-to-end runs and demos.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::{BinaryMask, RasterImage, SamplePair};

/// Squared distance from point `p` to segment `(a, b)`.
fn dist2_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (px, py) = p;
    let (ax, ay) = a;
    let (bx, by) = b;
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    (px - cx) * (px - cx) + (py - cy) * (py - cy)
}

/// One synthetic pair: a low-frequency textured background with 1-3 bright
/// road strokes crossing the frame.
pub fn generate_pair(height: usize, width: usize, seed: u64) -> SamplePair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Value-noise background: coarse random grid, bilinearly upsampled.
    let cell = 32usize;
    let (gh, gw) = (height / cell + 2, width / cell + 2);
    let mut coarse = Array2::<f32>::zeros((gh, gw));
    for v in coarse.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let base: [f32; 3] = [
        rng.random_range(0.18..0.34),
        rng.random_range(0.22..0.38),
        rng.random_range(0.16..0.30),
    ];
    let amp = 0.06f32;

    let mut img = Array3::<f32>::zeros((height, width, 3));
    for i in 0..height {
        for j in 0..width {
            let gi = i as f32 / cell as f32;
            let gj = j as f32 / cell as f32;
            let (i0, j0) = (gi.floor() as usize, gj.floor() as usize);
            let (fi, fj) = (gi - i0 as f32, gj - j0 as f32);
            let n = coarse[[i0, j0]] * (1.0 - fi) * (1.0 - fj)
                + coarse[[i0, j0 + 1]] * (1.0 - fi) * fj
                + coarse[[i0 + 1, j0]] * fi * (1.0 - fj)
                + coarse[[i0 + 1, j0 + 1]] * fi * fj;
            for c in 0..3 {
                let fine = rng.random_range(-0.015..0.015f32);
                img[[i, j, c]] = (base[c] + amp * n + fine).clamp(0.0, 1.0);
            }
        }
    }

    // Road strokes: straight segments spanning the frame.
    let mut mask = Array2::<u8>::zeros((height, width));
    let strokes = rng.random_range(1..=3usize);
    let mut segments = Vec::new();
    for _ in 0..strokes {
        let horizontal = rng.random::<bool>();
        let (a, b) = if horizontal {
            (
                (-8.0, rng.random_range(0.0..height as f64)),
                (width as f64 + 8.0, rng.random_range(0.0..height as f64)),
            )
        } else {
            (
                (rng.random_range(0.0..width as f64), -8.0),
                (rng.random_range(0.0..width as f64), height as f64 + 8.0),
            )
        };
        let half_width = rng.random_range(5.0..12.0f64);
        let shade = rng.random_range(0.62..0.82f32);
        segments.push((a, b, half_width, shade));
    }

    for i in 0..height {
        for j in 0..width {
            let p = (j as f64, i as f64);
            for &(a, b, hw, shade) in &segments {
                if dist2_to_segment(p, a, b) <= hw * hw {
                    mask[[i, j]] = 1;
                    let jitter = ((i * 7 + j * 13) % 11) as f32 / 11.0 * 0.04 - 0.02;
                    for c in 0..3 {
                        img[[i, j, c]] = (shade + jitter).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }

    SamplePair {
        image: RasterImage { data: img },
        mask: BinaryMask { data: mask },
        source_id: format!("synth_{seed:05}"),
    }
}

/// A deterministic synthetic dataset; pair `i` uses seed `seed + i`.
pub fn generate_dataset(count: usize, height: usize, width: usize, seed: u64) -> Vec<SamplePair> {
    (0..count)
        .map(|i| generate_pair(height, width, seed + i as u64))
        .collect()
}
