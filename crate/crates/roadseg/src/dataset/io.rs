//! PNG input/output for image/mask pairs. Pairing is by identical base
//! filename; images load as RGB rescaled to [0, 1], masks binarize at
//! gray level 128.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, RgbImage};
use ndarray::{Array2, Array3};

use super::{BinaryMask, RasterImage, SamplePair};
use crate::error::{Error, Result};

pub fn load_image(path: &Path) -> Result<RasterImage> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::image(path, e))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut data = Array3::zeros((h as usize, w as usize, 3));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[[y as usize, x as usize, c]] = f32::from(p.0[c]) / 255.0;
        }
    }
    RasterImage::new(data)
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::image(path, e))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut data = Array2::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        data[[y as usize, x as usize]] = u8::from(p.0[0] >= 128);
    }
    BinaryMask::new(data)
}

pub fn save_image(img: &RasterImage, path: &Path) -> Result<()> {
    let (h, w, c) = img.data.dim();
    assert_eq!(c, 3, "save_image expects RGB");
    let mut out = RgbImage::new(w as u32, h as u32);
    for (x, y, p) in out.enumerate_pixels_mut() {
        for ch in 0..3 {
            p.0[ch] = (img.data[[y as usize, x as usize, ch]] * 255.0).round() as u8;
        }
    }
    out.save(path).map_err(|e| Error::image(path, e))
}

pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let (h, w) = mask.data.dim();
    let mut out = GrayImage::new(w as u32, h as u32);
    for (x, y, p) in out.enumerate_pixels_mut() {
        p.0[0] = mask.data[[y as usize, x as usize]] * 255;
    }
    out.save(path).map_err(|e| Error::image(path, e))
}

/// List the PNG files of a directory, sorted by file stem.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Load all image/mask pairs. Every image file must have a mask file of the
/// same base name; pairs come back sorted by source id.
pub fn load_pairs(image_dir: &Path, mask_dir: &Path) -> Result<Vec<SamplePair>> {
    let mut pairs = Vec::new();
    for image_path in list_pngs(image_dir)? {
        let name = image_path
            .file_name()
            .expect("listed files have names")
            .to_owned();
        let mask_path = mask_dir.join(&name);
        if !mask_path.exists() {
            return Err(Error::MissingMask(mask_path));
        }
        let image = load_image(&image_path)?;
        let mask = load_mask(&mask_path)?;
        let source_id = image_path
            .file_stem()
            .expect("png files have stems")
            .to_string_lossy()
            .into_owned();
        pairs.push(SamplePair::new(image, mask, source_id)?);
    }
    Ok(pairs)
}
