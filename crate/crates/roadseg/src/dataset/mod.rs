//! Paired image/mask data: loading, patch extraction, geometric
//! augmentation, mirror padding, and sliding-window sampling.

pub mod augment;
pub mod io;
pub mod synthetic;

pub use augment::{augment_pair, AugmentParams, SampledTransform};
pub use io::load_pairs;

use ndarray::{s, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::objectives::ROAD_FRACTION_THRESHOLD;

/// An RGB raster with values rescaled to `[0, 1]`, stored `[h, w, c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pub data: Array3<f32>,
}

impl RasterImage {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (h, w, _c) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::InvalidInput("empty image".into()));
        }
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidInput(
                "image values must lie in [0, 1]".into(),
            ));
        }
        Ok(RasterImage { data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn crop(&self, r0: usize, c0: usize, h: usize, w: usize) -> RasterImage {
        RasterImage {
            data: self.data.slice(s![r0..r0 + h, c0..c0 + w, ..]).to_owned(),
        }
    }
}

/// A binary road mask; 1 = road.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub data: Array2<u8>,
}

impl BinaryMask {
    pub fn new(data: Array2<u8>) -> Result<Self> {
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput("mask values must be 0 or 1".into()));
        }
        Ok(BinaryMask { data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn road_fraction(&self) -> f64 {
        self.data.iter().map(|&v| u64::from(v)).sum::<u64>() as f64 / self.data.len() as f64
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }
}

/// An image and its mask; dimensions always agree.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub image: RasterImage,
    pub mask: BinaryMask,
    pub source_id: String,
}

impl SamplePair {
    pub fn new(image: RasterImage, mask: BinaryMask, source_id: String) -> Result<Self> {
        if (image.height(), image.width()) != (mask.height(), mask.width()) {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} vs mask {}x{} for `{source_id}`",
                image.height(),
                image.width(),
                mask.height(),
                mask.width()
            )));
        }
        Ok(SamplePair {
            image,
            mask,
            source_id,
        })
    }
}

/// Grid offsets along one axis: stride-spaced windows, with the final window
/// clamped to the edge when the stride does not tile exactly.
fn axis_offsets(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut offs = Vec::new();
    let mut o = 0;
    while o + patch <= dim {
        offs.push(o);
        o += stride;
    }
    if *offs.last().expect("patch <= dim") != dim - patch {
        offs.push(dim - patch);
    }
    offs
}

/// Cut a pair into aligned patches in row-major grid order.
pub fn extract_patches(pair: &SamplePair, patch_size: usize, stride: usize) -> Result<Vec<SamplePair>> {
    let (h, w) = (pair.image.height(), pair.image.width());
    if patch_size == 0 || stride == 0 {
        return Err(Error::InvalidInput("patch size and stride must be positive".into()));
    }
    if patch_size > h || patch_size > w {
        return Err(Error::InvalidInput(format!(
            "patch larger than image: {patch_size} vs {h}x{w}"
        )));
    }
    let mut out = Vec::new();
    for &r0 in &axis_offsets(h, patch_size, stride) {
        for &c0 in &axis_offsets(w, patch_size, stride) {
            let image = pair.image.crop(r0, c0, patch_size, patch_size);
            let mask = BinaryMask {
                data: pair
                    .mask
                    .data
                    .slice(s![r0..r0 + patch_size, c0..c0 + patch_size])
                    .to_owned(),
            };
            out.push(SamplePair {
                image,
                mask,
                source_id: format!("{}_{:03}_{:03}", pair.source_id, r0, c0),
            });
        }
    }
    Ok(out)
}

/// Defaults matching the patch-generation recipe (256x256 windows on a
/// 3x3 grid over 400x400 inputs).
pub const DEFAULT_PATCH_SIZE: usize = 256;
pub const DEFAULT_PATCH_STRIDE: usize = 72;

/// Reflect an index into `[0, n)` about the edges, excluding the edge pixel
/// itself (no doubled border).
fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n >= 1);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i % period;
    if m < 0 {
        m += period;
    }
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Extend an image by `pad` pixels on every side, reflecting about the edge
/// (row `[1,2,3]` with pad 1 becomes `[2,1,2,3,2]`).
pub fn mirror_pad(image: &RasterImage, pad: usize) -> Result<RasterImage> {
    let (h, w, c) = image.data.dim();
    if pad >= h || pad >= w {
        return Err(Error::InvalidInput(format!(
            "mirror pad {pad} needs interior pixels; image is {h}x{w}"
        )));
    }
    if pad == 0 {
        return Ok(image.clone());
    }
    let mut out = Array3::zeros((h + 2 * pad, w + 2 * pad, c));
    for i in 0..h + 2 * pad {
        let si = reflect_index(i as isize - pad as isize, h);
        for j in 0..w + 2 * pad {
            let sj = reflect_index(j as isize - pad as isize, w);
            for ch in 0..c {
                out[[i, j, ch]] = image.data[[si, sj, ch]];
            }
        }
    }
    Ok(RasterImage { data: out })
}

/// Flip/rotate a window: optional horizontal and vertical flips followed by
/// a counter-clockwise rotation of `rot_k` quarter turns.
pub fn orient_window(img: &RasterImage, h_flip: bool, v_flip: bool, rot_k: usize) -> RasterImage {
    let mut data = img.data.clone();
    if h_flip {
        data.invert_axis(ndarray::Axis(1));
    }
    if v_flip {
        data.invert_axis(ndarray::Axis(0));
    }
    for _ in 0..rot_k % 4 {
        // CCW quarter turn: transpose then reverse rows.
        data = data.permuted_axes([1, 0, 2]).as_standard_layout().to_owned();
        data.invert_axis(ndarray::Axis(0));
    }
    RasterImage { data }
}

/// Extract the context window around grid patch `(pr, pc)`, mirror-padding
/// across borders. The window is `patch_size + 2 * context_pad` on each side.
pub fn extract_window(
    pair: &SamplePair,
    pr: usize,
    pc: usize,
    patch_size: usize,
    context_pad: usize,
) -> Result<RasterImage> {
    let padded = mirror_pad(&pair.image, context_pad)?;
    let side = patch_size + 2 * context_pad;
    let (r0, c0) = (pr * patch_size, pc * patch_size);
    if r0 + side > padded.height() || c0 + side > padded.width() {
        return Err(Error::InvalidInput(format!(
            "patch ({pr},{pc}) out of bounds for {}x{} image",
            pair.image.height(),
            pair.image.width()
        )));
    }
    Ok(padded.crop(r0, c0, side, side))
}

/// Draw one training window for the sliding-window classifier: a random
/// grid patch from a random pair, its mirror-padded context window, a random
/// flip and quarter-turn rotation, and the patch's road label.
pub fn sample_training_window(
    pairs: &[SamplePair],
    patch_size: usize,
    context_pad: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(RasterImage, bool)> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no pairs to sample from".into()));
    }
    let pair = &pairs[rng.random_range(0..pairs.len())];
    let rows = pair.image.height() / patch_size;
    let cols = pair.image.width() / patch_size;
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidInput("image smaller than a patch".into()));
    }
    let (pr, pc) = (rng.random_range(0..rows), rng.random_range(0..cols));
    let window = extract_window(pair, pr, pc, patch_size, context_pad)?;

    let h_flip = rng.random::<bool>();
    let v_flip = rng.random::<bool>();
    let rot_k = rng.random_range(0..4usize);
    let window = orient_window(&window, h_flip, v_flip, rot_k);

    let patch_mask = pair.mask.data.slice(s![
        pr * patch_size..(pr + 1) * patch_size,
        pc * patch_size..(pc + 1) * patch_size
    ]);
    let road = patch_mask.iter().map(|&v| u64::from(v)).sum::<u64>() as f64
        / (patch_size * patch_size) as f64;
    Ok((window, road > ROAD_FRACTION_THRESHOLD))
}

/// Deterministic shuffled split; `floor(n * ratio)` pairs go to train.
pub fn split_train_val(
    pairs: &[SamplePair],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<SamplePair>, Vec<SamplePair>)> {
    if !(0.0..1.0).contains(&ratio) || ratio == 0.0 {
        return Err(Error::InvalidConfig(format!(
            "split ratio must be in (0, 1), got {ratio}"
        )));
    }
    if pairs.len() < 2 {
        return Err(Error::InvalidInput(
            "need at least 2 pairs to split".into(),
        ));
    }
    let n_train = (pairs.len() as f64 * ratio).floor() as usize;
    if n_train == 0 || n_train == pairs.len() {
        return Err(Error::InvalidInput(format!(
            "split ratio {ratio} leaves an empty side for {} pairs",
            pairs.len()
        )));
    }
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    // Fisher-Yates, explicit for portability of the draw sequence.
    for i in (1..idx.len()).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let train = idx[..n_train].iter().map(|&i| pairs[i].clone()).collect();
    let val = idx[n_train..].iter().map(|&i| pairs[i].clone()).collect();
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use rand::SeedableRng;

    fn gradient_pair(h: usize, w: usize, id: &str) -> SamplePair {
        let mut img = Array3::zeros((h, w, 3));
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    img[[i, j, c]] =
                        ((i * 31 + j * 17 + c * 7) % 97) as f32 / 96.0;
                }
            }
        }
        let mut mask = Array2::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                mask[[i, j]] = u8::from((i + j) % 3 == 0);
            }
        }
        SamplePair::new(
            RasterImage::new(img).unwrap(),
            BinaryMask::new(mask).unwrap(),
            id.to_string(),
        )
        .unwrap()
    }

    #[test]
    fn extract_patches_400_grid_is_nine() {
        let pair = gradient_pair(400, 400, "a");
        let patches = extract_patches(&pair, 256, 72).unwrap();
        assert_eq!(patches.len(), 9);
        // Offsets are {0, 72, 144} per axis.
        assert_eq!(patches[0].source_id, "a_000_000");
        assert_eq!(patches[4].source_id, "a_072_072");
        assert_eq!(patches[8].source_id, "a_144_144");
        for p in &patches {
            assert_eq!((p.image.height(), p.image.width()), (256, 256));
            assert_eq!((p.mask.height(), p.mask.width()), (256, 256));
        }
    }

    #[test]
    fn extract_patches_identity_when_patch_equals_image() {
        let pair = gradient_pair(64, 64, "b");
        let patches = extract_patches(&pair, 64, 64).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].image, pair.image);
        assert_eq!(patches[0].mask, pair.mask);
    }

    #[test]
    fn extract_patches_rejects_oversize_patch() {
        let pair = gradient_pair(32, 32, "c");
        let err = extract_patches(&pair, 64, 8).unwrap_err();
        assert!(err.to_string().contains("patch larger than image"));
    }

    #[test]
    fn extract_patches_exact_tiling_reconstructs_image() {
        let pair = gradient_pair(64, 64, "d");
        let patches = extract_patches(&pair, 32, 32).unwrap();
        assert_eq!(patches.len(), 4);
        let mut rebuilt = Array3::<f32>::zeros((64, 64, 3));
        for (k, p) in patches.iter().enumerate() {
            let (r0, c0) = ((k / 2) * 32, (k % 2) * 32);
            rebuilt
                .slice_mut(s![r0..r0 + 32, c0..c0 + 32, ..])
                .assign(&p.image.data);
        }
        assert_eq!(rebuilt, pair.image.data);
    }

    #[test]
    fn mirror_pad_reflects_rows_excluding_the_edge() {
        // Middle row [0.1, 0.2, 0.3] with pad 1 -> [0.2, 0.1, 0.2, 0.3, 0.2].
        let mut data = Array3::zeros((3, 3, 1));
        for i in 0..3 {
            for j in 0..3 {
                data[[i, j, 0]] = (i * 3 + j + 1) as f32 / 10.0;
            }
        }
        let img = RasterImage::new(data).unwrap();
        let padded = mirror_pad(&img, 1).unwrap();
        assert_eq!(padded.data.dim(), (5, 5, 1));
        let mid: Vec<f32> = padded.data.slice(s![2, .., 0]).to_vec();
        assert_eq!(mid, vec![0.5, 0.4, 0.5, 0.6, 0.5]);
        // Column reflection follows the same rule.
        let col: Vec<f32> = padded.data.slice(s![.., 2, 0]).to_vec();
        assert_eq!(col, vec![0.5, 0.2, 0.5, 0.8, 0.5]);
    }

    #[test]
    fn mirror_pad_corner_is_diagonal_interior() {
        let img = RasterImage::new(
            Array3::from_shape_vec((2, 2, 1), vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
        )
        .unwrap();
        let padded = mirror_pad(&img, 1).unwrap();
        assert_eq!(padded.data.dim(), (4, 4, 1));
        // Top-left padded corner reflects to the diagonally interior pixel.
        assert_eq!(padded.data[[0, 0, 0]], 0.4);
        assert_eq!(padded.data[[3, 3, 0]], 0.1);
    }

    #[test]
    fn mirror_pad_zero_is_identity_and_oversize_errors() {
        let pair = gradient_pair(8, 8, "e");
        assert_eq!(mirror_pad(&pair.image, 0).unwrap(), pair.image);
        assert!(mirror_pad(&pair.image, 8).is_err());
    }

    #[test]
    fn mirror_pad_then_center_crop_is_identity() {
        let pair = gradient_pair(9, 13, "f");
        for pad in [1, 3, 7] {
            let padded = mirror_pad(&pair.image, pad).unwrap();
            let cropped = padded.crop(pad, pad, 9, 13);
            assert_eq!(cropped, pair.image);
        }
    }

    #[test]
    fn window_at_corner_is_well_defined() {
        let pair = gradient_pair(64, 64, "g");
        let win = extract_window(&pair, 0, 0, 16, 24).unwrap();
        assert_eq!((win.height(), win.width()), (64, 64));
        // Identity orientation equals the raw extraction.
        let same = orient_window(&win, false, false, 0);
        assert_eq!(same, win);
    }

    #[test]
    fn sampled_label_is_one_on_all_road_image() {
        let img = RasterImage::new(Array3::from_elem((32, 32, 3), 0.5)).unwrap();
        let mask = BinaryMask::new(Array2::ones((32, 32))).unwrap();
        let pair = SamplePair::new(img, mask, "h".into()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let (win, label) =
                sample_training_window(std::slice::from_ref(&pair), 16, 24, &mut rng).unwrap();
            assert_eq!((win.height(), win.width()), (64, 64));
            assert!(label);
        }
    }

    #[test]
    fn sample_training_window_rejects_empty_list() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_training_window(&[], 16, 24, &mut rng).is_err());
    }

    #[test]
    fn orient_window_rotation_cycles() {
        let pair = gradient_pair(8, 8, "i");
        let r4 = orient_window(&pair.image, false, false, 4);
        assert_eq!(r4, pair.image);
        let r1 = orient_window(&pair.image, false, false, 1);
        assert_ne!(r1, pair.image);
        let back = orient_window(&r1, false, false, 3);
        assert_eq!(back, pair.image);
    }

    #[test]
    fn split_sizes_and_partition() {
        let pairs: Vec<SamplePair> = (0..900)
            .map(|i| gradient_pair(8, 8, &format!("p{i:03}")))
            .collect();
        let (train, val) = split_train_val(&pairs, 0.8, 42).unwrap();
        assert_eq!(train.len(), 720);
        assert_eq!(val.len(), 180);

        let mut ids: Vec<&str> = train
            .iter()
            .chain(val.iter())
            .map(|p| p.source_id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 900);
    }

    #[test]
    fn split_two_items_half() {
        let pairs = vec![gradient_pair(8, 8, "x"), gradient_pair(8, 8, "y")];
        let (train, val) = split_train_val(&pairs, 0.5, 1).unwrap();
        assert_eq!((train.len(), val.len()), (1, 1));
    }

    #[test]
    fn split_is_seed_deterministic_and_rejects_tiny_input() {
        let pairs: Vec<SamplePair> = (0..10)
            .map(|i| gradient_pair(8, 8, &format!("q{i}")))
            .collect();
        let (a1, b1) = split_train_val(&pairs, 0.7, 9).unwrap();
        let (a2, b2) = split_train_val(&pairs, 0.7, 9).unwrap();
        let ids = |v: &[SamplePair]| v.iter().map(|p| p.source_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a1), ids(&a2));
        assert_eq!(ids(&b1), ids(&b2));

        assert!(split_train_val(&pairs[..1], 0.5, 0).is_err());
    }
}
